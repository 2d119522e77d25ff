//! Cumulative-shift histograms and the drift of each task's update away from
//! the first one.

use pslora::analysis::{frob_similarity, pooled_selection, shift_histogram_in_range};
use pslora::data::{make_sequence, pretrain_mixture, SequenceSpec};
use pslora::trainer::{pretrain_base, run_sequence, PretrainConfig};
use pslora::{HistoryMode, Matrix, TrainConfig};

fn main() -> pslora::Result<()> {
    let spec = SequenceSpec::drop_fixture(1);
    let tasks = make_sequence(&spec)?;
    let (base, _) = pretrain_base(
        &pretrain_mixture(&spec)?,
        spec.d_in,
        spec.n_classes,
        &PretrainConfig::default(),
    )?;
    let run = run_sequence(&base, &tasks, &TrainConfig::default(), HistoryMode::Sum)?;
    let deltas: Vec<Matrix> = run.adapters.iter().map(|t| t[0].delta()).collect();

    let mut cum = Vec::new();
    let mut acc = Matrix::zeros(deltas[0].rows(), deltas[0].cols());
    for d in &deltas {
        acc.add_assign(d)?;
        cum.push(acc.clone());
    }
    let range = cum
        .iter()
        .map(|c| pooled_selection(c, 0.2, 4).map(|s| s.iter().fold(0.0f32, |a, v| a.max(v.abs()))))
        .collect::<pslora::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0f32, f32::max) as f64;
    for (t, c) in cum.iter().enumerate() {
        let h = shift_histogram_in_range(c, 0.2, 4, range, 21, t + 1)?;
        let bar: String = h
            .counts
            .iter()
            .map(|&n| match n {
                0 => ' ',
                1..=2 => '.',
                3..=5 => ':',
                _ => '#',
            })
            .collect();
        println!("after task {}: [{bar}]  ({} pooled entries)", t + 1, h.selected.len());
    }
    println!("shared axis [-{range:.4}, {range:.4}]");
    for (t, d) in deltas.iter().enumerate().skip(1) {
        println!(
            "similarity(delta {}, delta 1) = {:+.4}",
            t + 1,
            frob_similarity(d, &deltas[0])?
        );
    }
    Ok(())
}
