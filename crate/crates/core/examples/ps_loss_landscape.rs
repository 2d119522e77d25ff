//! How the stability penalty treats aligned and conflicting updates as the
//! temperature grows.

use pslora::regularizers::{ps_loss, ps_loss_with, PsReduction};
use pslora::Matrix;

fn main() -> pslora::Result<()> {
    let prev = Matrix::scalar(0.5);
    let alphas = [1.0, 10.0, 100.0, 1000.0];
    print!("{:>7}", "w");
    for a in alphas {
        print!("  {:<13}", format!("alpha={a}"));
    }
    println!();
    for i in -4..=4 {
        let w = i as f32 * 0.25;
        print!("{w:>7.2}");
        for a in alphas {
            print!("  {:<13.5}", ps_loss(&Matrix::scalar(w), &prev, a)?);
        }
        println!();
    }
    println!("(history entry fixed at +0.5; negative w flips its sign)");

    let delta = Matrix::from_rows(&[[0.3, -0.2], [0.1, 0.4]])?;
    let hist = Matrix::from_rows(&[[0.2, 0.2], [-0.3, 0.1]])?;
    for red in [PsReduction::Elementwise, PsReduction::Global] {
        println!("{red:?} reduction: {:.6}", ps_loss_with(&delta, &hist, 10.0, red)?);
    }
    Ok(())
}
