//! Magnitude-max, averaging and TIES merges of the same deltas.

use pslora::merging::{merge_fold, merge_fold_with_sources, merge_pair, MergePolicy, MergeStrategy};
use pslora::Matrix;

fn show(label: &str, m: &Matrix) {
    println!("{label:<14} {:?}", m.data());
}

fn main() -> pslora::Result<()> {
    let x = Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.0]])?;
    let y = Matrix::from_rows(&[[-4.0, 1.0], [2.0, 5.0]])?;
    show("x", &x);
    show("y", &y);
    show("merge_pair", &merge_pair(&x, &y)?);

    let deltas = vec![
        Matrix::from_rows(&[[1.0, -3.0, 0.1]])?,
        Matrix::from_rows(&[[2.0, 3.0, -0.1]])?,
        Matrix::from_rows(&[[-0.5, 0.2, 0.4]])?,
    ];
    for (i, d) in deltas.iter().enumerate() {
        show(&format!("delta {}", i + 1), d);
    }
    for strategy in [MergeStrategy::MagnitudeMax, MergeStrategy::Average, MergeStrategy::Ties] {
        let policy = MergePolicy {
            strategy,
            ties_trim_fraction: 2.0 / 3.0,
        };
        show(strategy.name(), &merge_fold(&deltas, &policy)?);
    }
    let (_, sources) = merge_fold_with_sources(&deltas)?;
    println!(
        "magnitude_max picks tasks {:?}",
        sources.iter().map(|s| s + 1).collect::<Vec<_>>()
    );
    Ok(())
}
