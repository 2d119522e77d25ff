//! Which part of the last task's update causes forgetting: entries that agree
//! in sign with the history, or entries that oppose it.

use pslora::analysis::{eval_subset, sign_split, SubsetVariant};
use pslora::data::{make_sequence, pretrain_mixture, SequenceSpec};
use pslora::trainer::{pretrain_base, run_sequence, PretrainConfig};
use pslora::{HistoryMode, Matrix, TrainConfig};

fn main() -> pslora::Result<()> {
    let spec = SequenceSpec::drop_fixture(0);
    let tasks = make_sequence(&spec)?;
    let (base, _) = pretrain_base(
        &pretrain_mixture(&spec)?,
        spec.d_in,
        spec.n_classes,
        &PretrainConfig::default(),
    )?;
    let mut cfg = TrainConfig::default();
    cfg.reg.lambda = 0.0;
    let run = run_sequence(&base, &tasks, &cfg, HistoryMode::Sum)?;

    let last = tasks.len() - 1;
    let deltas: Vec<Vec<Matrix>> = run
        .adapters
        .iter()
        .map(|t| t.iter().map(|a| a.delta()).collect())
        .collect();
    let history: Vec<Matrix> = (0..deltas[0].len())
        .map(|l| {
            let mut acc = Matrix::zeros(deltas[0][l].rows(), deltas[0][l].cols());
            for d in &deltas[..last] {
                acc.add_assign(&d[l])?;
            }
            Ok(acc)
        })
        .collect::<pslora::Result<_>>()?;
    let probes: Vec<_> = tasks.tasks[..last].iter().map(|t| &t.test).collect();

    println!("k%    same   opposite  acc(same)  acc(opposite)  acc(both)");
    for k in [20.0, 40.0, 60.0, 80.0, 100.0] {
        let splits = (0..history.len())
            .map(|l| sign_split(&deltas[last][l], &history[l], k))
            .collect::<pslora::Result<Vec<_>>>()?;
        let acc = |v| eval_subset(&base, &history, &deltas[last], &splits, v, &probes);
        println!(
            "{k:<5} {:.3}  {:.3}     {:.3}      {:.3}          {:.3}",
            splits[0].same_fraction,
            splits[0].opposite_fraction,
            acc(SubsetVariant::Same)?,
            acc(SubsetVariant::Opposite)?,
            acc(SubsetVariant::Both)?
        );
    }
    Ok(())
}
