//! Second-order forgetting bound: exact on a convex quadratic, then probed
//! around a trained adapter.
//!
//! Usage: `cargo run --release --example taylor_bound -- [seed]`

use pslora::analysis::{taylor_bound_check, trained_taylor_study, TaylorStudyConfig};
use pslora::data::{make_sequence, pretrain_mixture, SequenceSpec};
use pslora::trainer::{pretrain_base, PretrainConfig};
use pslora::TrainConfig;

fn main() -> pslora::Result<()> {
    let quad = |t: &[f64]| 0.5 * (t[0] * t[0] + 4.0 * t[1] * t[1]);
    let c = taylor_bound_check(quad, &[0.0, 0.0], &[1.0, 1.0])?;
    println!(
        "quadratic: dL = {:.4}, bound = {:.4}, holds = {}",
        c.delta_loss, c.bound, c.holds
    );

    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SequenceSpec::drop_fixture(seed);
    let tasks = make_sequence(&spec)?;
    let pre = PretrainConfig {
        seed,
        ..Default::default()
    };
    let (base, _) = pretrain_base(&pretrain_mixture(&spec)?, spec.d_in, spec.n_classes, &pre)?;
    let cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    let study = trained_taylor_study(&base, &tasks.tasks[0], &cfg, &TaylorStudyConfig::default())?;
    println!(
        "trained adapter: lambda_max = {:.5}, |grad| = {:.3e}, bound holds for {:.0}% of {} perturbations",
        study.lambda_max,
        study.grad_norm,
        100.0 * study.holds_fraction,
        study.checks.len()
    );
    for c in study.checks.iter().take(5) {
        println!("  dL = {:+.3e}  bound = {:.3e}", c.delta_loss, c.bound);
    }
    Ok(())
}
