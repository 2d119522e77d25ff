//! Stacking frozen low-rank adapters over a frozen base, and folding the
//! stack into dense weights.

use pslora::lora::cumulative_delta;
use pslora::{BaseModel, ContinualModel, DenseModel, HistoryMode, LoraAdapter, Matrix};

fn main() -> pslora::Result<()> {
    let fresh = LoraAdapter::new(1, "fc1", (6, 4), 2, 3)?;
    println!(
        "fresh adapter: A {:?}, B {:?}, |delta| = {}",
        fresh.a().shape(),
        fresh.b().shape(),
        fresh.delta().frob_norm()
    );

    let base = BaseModel::freeze(DenseModel::init_mlp(6, 8, 3, 0));
    let mut model = ContinualModel::new(base.clone(), 1.0, HistoryMode::Sum);
    for task in 1..=3u32 {
        model.begin_task(task, 2, task as u64)?;
        for l in 0..2 {
            let a = model.active()[l].a().clone();
            let k = model.active()[l].b().cols();
            let b = Matrix::from_fn(2, k, |r, c| ((r + c) as f32 + task as f32).sin() * 0.2);
            model.set_active_factors(l, a, b)?;
        }
        model.freeze_active()?;
    }

    for (l, layer) in base.net().layers.iter().enumerate() {
        let ads: Vec<&LoraAdapter> = model.frozen().iter().map(|t| &t[l]).collect();
        let total = cumulative_delta(layer.weight.shape(), ads)?;
        println!(
            "{}: |W0| = {:.4}, |sum of deltas| = {:.4}",
            layer.id,
            layer.weight.frob_norm(),
            total.frob_norm()
        );
    }

    let x = Matrix::from_fn(4, 6, |r, c| ((r * 6 + c) as f32 * 0.2).cos());
    let stacked = model.forward(&x)?;
    let dense = model.effective()?.logits(&x)?;
    let gap = stacked.sub(&dense)?.max_abs();
    println!("stacked vs folded logits: max |diff| = {gap:.2e}");
    Ok(())
}
