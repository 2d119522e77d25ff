mod common;

use common::{oracle_acc, oracle_fr, Grid};
use proptest::prelude::*;

use pslora::analysis::{frob_similarity, sign_split};
use pslora::lora::{cumulative_delta, BaseModel, ContinualModel, DenseModel, HistoryMode, LoraAdapter};
use pslora::merging::{merge_fold, merge_pair, MergePolicy, MergeStrategy};
use pslora::metrics::{final_acc, fr, AccuracyMatrix};
use pslora::regularizers::ps_loss;
use pslora::Matrix;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-2.0f32..2.0, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn pair() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..5, 1usize..5).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))
}

fn upper(n: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (
        prop::collection::vec(prop::collection::vec(0.0f64..=1.0, n), n),
        prop::collection::vec(1usize..500, n),
    )
}

fn grid(rows: &[Vec<f64>]) -> Grid {
    let n = rows.len();
    (0..n)
        .map(|i| (0..n).map(|j| (j >= i).then(|| rows[i][j])).collect())
        .collect()
}

#[allow(clippy::needless_range_loop)]
fn build(rows: &[Vec<f64>], sizes: &[usize]) -> AccuracyMatrix {
    let n = rows.len();
    let mut m = AccuracyMatrix::new(sizes.to_vec()).unwrap();
    for i in 0..n {
        for j in i..n {
            m.set(i, j, rows[i][j]).unwrap();
        }
    }
    m
}

proptest! {
    #[test]
    fn ps_loss_is_non_negative((d, p) in pair(), alpha in 0.01f64..50.0) {
        prop_assert!(ps_loss(&d, &p, alpha).unwrap() >= 0.0);
    }

    #[test]
    fn ps_loss_of_zero_delta_vanishes(p in matrix(3, 4), alpha in 0.01f64..50.0) {
        prop_assert_eq!(ps_loss(&Matrix::zeros(3, 4), &p, alpha).unwrap(), 0.0);
    }

    #[test]
    fn ps_loss_without_history_is_mean_square(d in matrix(3, 5), alpha in 0.01f64..50.0) {
        let got = ps_loss(&d, &Matrix::zeros(3, 5), alpha).unwrap();
        let want = d.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 15.0;
        prop_assert!((got - want).abs() <= 1e-6 * want.max(1.0));
    }

    #[test]
    fn conflict_costs_more_than_alignment(w in 0.01f32..2.0, p in 0.01f32..2.0, alpha in 0.1f64..20.0) {
        let d = Matrix::scalar(w);
        let aligned = ps_loss(&d, &Matrix::scalar(p), alpha).unwrap();
        let conflict = ps_loss(&d, &Matrix::scalar(-p), alpha).unwrap();
        prop_assert!(conflict > aligned);
    }

    #[test]
    fn conflict_grows_with_temperature(w in 0.05f32..1.0, p in 0.05f32..1.0, a in 0.1f64..3.0) {
        let d = Matrix::scalar(w);
        let h = Matrix::scalar(-p);
        prop_assert!(ps_loss(&d, &h, 2.0 * a).unwrap() > ps_loss(&d, &h, a).unwrap());
    }

    #[test]
    fn merge_pair_selects_the_larger_magnitude((x, y) in pair()) {
        let m = merge_pair(&x, &y).unwrap();
        for ((&a, &b), &v) in x.data().iter().zip(y.data()).zip(m.data()) {
            prop_assert!(v == a || v == b);
            prop_assert_eq!(v.abs(), a.abs().max(b.abs()));
            if a.abs() == b.abs() {
                prop_assert_eq!(v, a);
            }
        }
        prop_assert_eq!(merge_pair(&x, &x).unwrap(), x.clone());
        prop_assert_eq!(merge_pair(&x, &Matrix::zeros(x.rows(), x.cols())).unwrap(), x.clone());
        prop_assert_eq!(merge_pair(&Matrix::zeros(x.rows(), x.cols()), &x).unwrap(), x);
    }

    #[test]
    fn magnitude_fold_peaks_over_inputs(xs in prop::collection::vec(matrix(2, 3), 1..6)) {
        let m = merge_fold(&xs, &MergePolicy::default()).unwrap();
        for e in 0..6 {
            let best = xs.iter().map(|x| x.data()[e].abs()).fold(0.0f32, f32::max);
            prop_assert_eq!(m.data()[e].abs(), best);
            prop_assert!(xs.iter().any(|x| x.data()[e] == m.data()[e]));
        }
    }

    #[test]
    fn ties_entries_follow_the_elected_sign(xs in prop::collection::vec(matrix(2, 2), 1..5), frac in 0.1f64..=1.0) {
        let policy = MergePolicy { strategy: MergeStrategy::Ties, ties_trim_fraction: frac };
        let m = merge_fold(&xs, &policy).unwrap();
        for e in 0..4 {
            let lo = xs.iter().map(|x| x.data()[e]).fold(f32::INFINITY, f32::min);
            let hi = xs.iter().map(|x| x.data()[e]).fold(f32::NEG_INFINITY, f32::max);
            let v = m.data()[e];
            prop_assert!(v == 0.0 || (v >= lo.min(0.0) - 1e-6 && v <= hi.max(0.0) + 1e-6));
        }
    }

    #[test]
    fn average_is_linear(xs in prop::collection::vec(matrix(2, 2), 1..5)) {
        let m = merge_fold(&xs, &MergePolicy::new(MergeStrategy::Average)).unwrap();
        for e in 0..4 {
            let want = xs.iter().map(|x| x.data()[e] as f64).sum::<f64>() / xs.len() as f64;
            prop_assert!((m.data()[e] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn metrics_bounds_and_oracles((rows, sizes) in (1usize..6).prop_flat_map(upper)) {
        let m = build(&rows, &sizes);
        let g = grid(&rows);
        let acc = final_acc(&m).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((acc - oracle_acc(&g, &sizes)).abs() < 1e-12);
        if rows.len() > 1 {
            let f = fr(&m).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!((f - oracle_fr(&g)).abs() < 1e-12);
        }
    }

    #[test]
    fn fr_zero_iff_final_is_row_peak((rows, sizes) in (2usize..6).prop_flat_map(upper)) {
        let n = rows.len();
        let mut rows = rows;
        for row in rows.iter_mut() {
            let peak = row.iter().cloned().fold(0.0, f64::max);
            row[n - 1] = peak;
        }
        prop_assert_eq!(fr(&build(&rows, &sizes)).unwrap(), 0.0);
    }

    #[test]
    fn final_acc_invariant_under_relabelling((rows, sizes) in (2usize..6).prop_flat_map(upper), shift in 0usize..5) {
        let n = rows.len();
        let finals: Vec<f64> = rows.iter().map(|r| r[n - 1]).collect();
        let m = AccuracyMatrix::new(sizes.clone()).unwrap().with_final_column(&finals);
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let p_sizes: Vec<usize> = perm.iter().map(|&i| sizes[i]).collect();
        let p_finals: Vec<f64> = perm.iter().map(|&i| finals[i]).collect();
        let p = AccuracyMatrix::new(p_sizes).unwrap().with_final_column(&p_finals);
        if let (Ok(m), Ok(p)) = (m, p) {
            prop_assert!((final_acc(&m).unwrap() - final_acc(&p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_split_masks_partition_selection((d, p) in pair(), k in 1.0f64..=100.0) {
        let s = sign_split(&d, &p, k).unwrap();
        prop_assert!(s.same_mask.iter().zip(&s.opposite_mask).all(|(a, b)| !(*a && *b)));
        prop_assert!(s.same_fraction + s.opposite_fraction <= 1.0 + 1e-12);
        prop_assert!(s.same_count() + s.opposite_count() <= s.selected);
    }

    #[test]
    fn sign_split_depends_only_on_signs((d, p) in pair(), a in 0.1f32..10.0, b in 0.1f32..10.0) {
        let s = sign_split(&d, &p, 100.0).unwrap();
        let t = sign_split(&d.scale(a), &p.scale(b), 100.0).unwrap();
        prop_assert_eq!(s.same_fraction, t.same_fraction);
        prop_assert_eq!(s.opposite_fraction, t.opposite_fraction);
    }

    #[test]
    fn full_sign_split_matches_entry_loop(d in matrix(10, 10), p in matrix(10, 10)) {
        let s = sign_split(&d, &p, 100.0).unwrap();
        for e in 0..100 {
            let prod = d.data()[e] as f64 * p.data()[e] as f64;
            prop_assert_eq!(s.same_mask[e], prod > 0.0);
            prop_assert_eq!(s.opposite_mask[e], prod < 0.0);
        }
    }

    #[test]
    fn similarity_is_symmetric_and_scale_free((a, b) in pair(), c in 0.01f32..100.0) {
        prop_assume!(a.frob_norm() > 1e-3 && b.frob_norm() > 1e-3);
        let s = frob_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - frob_similarity(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((s - frob_similarity(&a.scale(c), &b).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn stacked_forward_equals_monolithic_weights(seed in 0u64..1000, tasks in 1usize..4, rank in 1usize..3) {
        let base = BaseModel::freeze(DenseModel::init_mlp(5, 4, 3, seed));
        let mut model = ContinualModel::new(base.clone(), 1.0, HistoryMode::Sum);
        for t in 0..tasks {
            model.begin_task(t as u32 + 1, rank, seed + t as u64).unwrap();
            for l in 0..2 {
                let (a, b) = (model.active()[l].a().clone(), model.active()[l].b().clone());
                let b = Matrix::from_fn(b.rows(), b.cols(), |r, c| ((r * 3 + c + t) as f32 * 0.7).sin() * 0.3);
                model.set_active_factors(l, a, b).unwrap();
            }
            model.freeze_active().unwrap();
        }
        let x = Matrix::from_fn(6, 5, |r, c| ((r + 2 * c) as f32 * 0.3).cos());
        let got = model.forward(&x).unwrap();
        let mut mono = base.net().clone();
        for (l, layer) in mono.layers.iter_mut().enumerate() {
            let ads: Vec<&LoraAdapter> = model.frozen().iter().map(|t| &t[l]).collect();
            let total = cumulative_delta(layer.weight.shape(), ads).unwrap();
            layer.weight = layer.weight.add(&total).unwrap();
        }
        let want = mono.logits(&x).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            prop_assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0));
        }
    }

    #[test]
    fn fresh_adapter_has_zero_delta(d in 1usize..8, k in 1usize..8, seed in 0u64..1000) {
        let r = d.min(k);
        let a = LoraAdapter::new(1, "l", (d, k), r, seed).unwrap();
        prop_assert!(a.delta().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_is_an_involution(m in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| matrix(r, c))) {
        prop_assert_eq!(m.transpose().transpose(), m);
    }
}
