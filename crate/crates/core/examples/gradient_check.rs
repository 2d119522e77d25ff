//! Reverse-mode gradients of a small tape expression against central
//! differences.

use pslora::{Matrix, Tape};

fn objective(w: &Matrix, x: &Matrix, labels: &[usize]) -> pslora::Result<(f32, Matrix)> {
    let mut tape = Tape::new();
    let wid = tape.leaf(w.clone());
    let xid = tape.constant(x.clone());
    let h = tape.matmul(xid, wid)?;
    let h = tape.tanh(h);
    let ce = tape.softmax_xent(h, labels)?;
    let reg = tape.frob_norm_sq(wid);
    let reg = tape.scale(reg, 0.05);
    let loss = tape.add(ce, reg)?;
    let value = tape.value(loss).item()?;
    let grads = tape.grad(loss)?;
    Ok((value, grads.wrt(wid)))
}

fn main() -> pslora::Result<()> {
    let x = Matrix::from_fn(6, 4, |r, c| ((r * 4 + c) as f32 * 0.37).sin());
    let w = Matrix::from_fn(4, 3, |r, c| ((r + 2 * c) as f32 * 0.61).cos() * 0.5);
    let labels = [0, 1, 2, 0, 1, 2];
    let (value, grad) = objective(&w, &x, &labels)?;
    println!("loss = {value:.6}");

    let h = 1e-2;
    let mut worst: f32 = 0.0;
    println!("entry   analytic     central-diff");
    for i in 0..w.len() {
        let mut up = w.clone();
        up.data_mut()[i] += h;
        let mut down = w.clone();
        down.data_mut()[i] -= h;
        let fd = (objective(&up, &x, &labels)?.0 - objective(&down, &x, &labels)?.0) / (2.0 * h);
        let g = grad.data()[i];
        worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-3));
        println!("{i:<7} {g:+.6}    {fd:+.6}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
