//! One run over the four-task drop fixture: the accuracy matrix before and
//! after the final merge.
//!
//! Usage: `cargo run --release --example drop_sequence -- [seed]`

use pslora::data::{make_sequence, pretrain_mixture, SequenceSpec};
use pslora::merging::merged_weights;
use pslora::trainer::{evaluate, pretrain_base, run_sequence, PretrainConfig};
use pslora::{FrMode, HistoryMode, MergePolicy, MetricSummary, TrainConfig};

fn main() -> pslora::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SequenceSpec::drop_fixture(seed);
    let tasks = make_sequence(&spec)?;
    let pre = PretrainConfig {
        seed,
        ..Default::default()
    };
    let (base, base_acc) = pretrain_base(&pretrain_mixture(&spec)?, spec.d_in, spec.n_classes, &pre)?;
    println!("base accuracy on the pretraining mixture: {base_acc:.4}");
    let cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    let run = run_sequence(&base, &tasks, &cfg, HistoryMode::Sum)?;
    let n = tasks.len();
    println!("task  {}", (1..=n).map(|j| format!("after {j}  ")).collect::<String>());
    for i in 0..n {
        let row: String = (0..n)
            .map(|j| match run.acc_matrix.get(i, j) {
                Some(v) => format!("{v:<9.3}"),
                None => format!("{:<9}", "-"),
            })
            .collect();
        println!("{:<5} {row}", i + 1);
    }
    for s in &run.sign_stats {
        println!("task {} opposite-sign fraction {:.3}", s.task, s.opposite_fraction);
    }
    let merged = merged_weights(&base, &run.flat_adapters(), &MergePolicy::default(), cfg.lora_scale)?;
    let finals = tasks
        .tasks
        .iter()
        .map(|t| evaluate(&merged, &t.test))
        .collect::<pslora::Result<Vec<_>>>()?;
    let before = MetricSummary::compute(&run.acc_matrix, FrMode::Peak);
    let after = MetricSummary::compute(&run.acc_matrix.with_final_column(&finals)?, FrMode::Peak);
    println!(
        "unmerged: acc {:.4}, fr {:.4}",
        before.acc.unwrap_or(0.0),
        before.fr.unwrap_or(0.0)
    );
    println!(
        "merged:   acc {:.4}, fr {:.4}",
        after.acc.unwrap_or(0.0),
        after.fr.unwrap_or(0.0)
    );
    Ok(())
}
