//! Continual-learning metrics on a hand-written three-task accuracy matrix.

use pslora::metrics::{fr_with, AccMatrixFile, FrMode};
use pslora::{AccuracyMatrix, MetricSummary};

fn main() -> pslora::Result<()> {
    let mut m = AccuracyMatrix::from_upper(
        &[vec![0.92, 0.85, 0.70], vec![0.88, 0.80], vec![0.90]],
        vec![200, 200, 400],
    )?;
    m.set(1, 0, 0.55)?;
    m.set(2, 1, 0.40)?;
    m.set_scratch(vec![0.93, 0.89, 0.91])?;

    let s = MetricSummary::compute(&m, FrMode::Peak);
    println!("acc {:.4}", s.acc.unwrap_or(f64::NAN));
    println!("bwt {:+.4}", s.bwt.unwrap_or(f64::NAN));
    println!("fwt {:+.4}", s.fwt.unwrap_or(f64::NAN));
    println!(
        "fr  {:.4}  (literal reading: {:.4})",
        s.fr.unwrap_or(f64::NAN),
        fr_with(&m, FrMode::Literal)?
    );
    println!("aaa {:.4}", s.aaa.unwrap_or(f64::NAN));
    println!(
        "{}",
        serde_json::to_string_pretty(&AccMatrixFile::from_matrix(&m, |x| x))?
    );
    Ok(())
}
