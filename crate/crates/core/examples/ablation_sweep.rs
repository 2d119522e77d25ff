//! Three-way ablation on the drop fixture across seeds: incremental adapters
//! with no regularizer, the stability loss alone, and the stability loss
//! followed by a final magnitude merge.
//!
//! Usage: `cargo run --release --example ablation_sweep -- [lambda] [seeds] [alpha]`

use pslora::data::{make_sequence, pretrain_mixture, SequenceSpec};
use pslora::merging::merged_weights;
use pslora::metrics::{final_acc, fr};
use pslora::trainer::{evaluate, pretrain_base, run_sequence, PretrainConfig};
use pslora::{HistoryMode, MergePolicy, RegularizerConfig, TrainConfig};

fn main() -> pslora::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let lambda: f64 = args
        .get(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(RegularizerConfig::default().lambda);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let alpha: f64 = args
        .get(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(RegularizerConfig::default().alpha);
    println!("lambda = {lambda}, alpha = {alpha}");
    println!("seed  variant      final_acc  fr       opp_frac(task 4)");
    for seed in 0..seeds {
        let spec = SequenceSpec::drop_fixture(seed);
        let tasks = make_sequence(&spec)?;
        let mixture = pretrain_mixture(&spec)?;
        let (base, base_acc) = pretrain_base(
            &mixture,
            spec.d_in,
            spec.n_classes,
            &PretrainConfig {
                seed,
                ..Default::default()
            },
        )?;
        println!("{seed:<5} base acc     {base_acc:.4}");
        for (name, lam, merge) in [
            ("inc_lora", 0.0, false),
            ("ps_only", lambda, false),
            ("ps_merge", lambda, true),
        ] {
            let mut cfg = TrainConfig {
                seed,
                ..Default::default()
            };
            cfg.reg.lambda = lam;
            cfg.reg.alpha = alpha;
            let run = run_sequence(&base, &tasks, &cfg, HistoryMode::Sum)?;
            let mut m = run.acc_matrix.clone();
            if merge {
                let merged = merged_weights(&base, &run.flat_adapters(), &MergePolicy::default(), cfg.lora_scale)?;
                let finals = tasks
                    .tasks
                    .iter()
                    .map(|t| evaluate(&merged, &t.test))
                    .collect::<pslora::Result<Vec<_>>>()?;
                m = m.with_final_column(&finals)?;
            }
            let opp = run.sign_stats.last().map(|s| s.opposite_fraction).unwrap_or(0.0);
            println!(
                "{seed:<5} {name:<12} {:.4}     {:.4}   {opp:.4}",
                final_acc(&m)?,
                fr(&m)?
            );
        }
    }
    Ok(())
}
