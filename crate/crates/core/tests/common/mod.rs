//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's numerics: losses are recomputed in
//! `f64` from raw weights and metrics with plain loops over nested vectors.

#![allow(dead_code, clippy::needless_range_loop)]

use pslora::lora::ContinualModel;
use pslora::Matrix;

pub fn to_f64(m: &Matrix) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

/// One layer of the reference network: frozen weight (base plus history), bias and history.
pub struct RefLayer {
    pub w0: Vec<f64>,
    pub bias: Vec<f64>,
    pub hist: Vec<f64>,
    pub d: usize,
    pub k: usize,
    pub r: usize,
}

/// `f64` re-implementation of the training objective over the active factors.
pub struct RefObjective {
    pub layers: Vec<RefLayer>,
    pub scale: f64,
    pub x: Vec<f64>,
    pub n: usize,
    pub y: Vec<usize>,
    pub lambda: f64,
    pub alpha: f64,
    pub stability: bool,
}

impl RefObjective {
    pub fn from_model(
        model: &ContinualModel,
        x: &Matrix,
        y: &[usize],
        lambda: f64,
        alpha: f64,
        stability: bool,
    ) -> Self {
        let layers = model
            .base()
            .net()
            .layers
            .iter()
            .zip(model.history())
            .zip(model.active())
            .map(|((l, h), a)| RefLayer {
                w0: to_f64(&l.weight),
                bias: to_f64(&l.bias),
                hist: to_f64(h),
                d: l.weight.rows(),
                k: l.weight.cols(),
                r: a.rank(),
            })
            .collect();
        Self {
            layers,
            scale: model.scale() as f64,
            x: to_f64(x),
            n: x.rows(),
            y: y.to_vec(),
            lambda,
            alpha,
            stability,
        }
    }

    /// Parameters in `[A_1, B_1, A_2, B_2, ...]` order.
    pub fn params(model: &ContinualModel) -> Vec<f64> {
        model
            .active()
            .iter()
            .flat_map(|a| to_f64(a.a()).into_iter().chain(to_f64(a.b())))
            .collect()
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let mut off = 0;
        let mut h = self.x.clone();
        let mut stab = 0.0;
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let a = &theta[off..off + l.d * l.r];
            let b = &theta[off + l.d * l.r..off + l.d * l.r + l.r * l.k];
            off += l.d * l.r + l.r * l.k;
            let mut delta = vec![0.0; l.d * l.k];
            for i in 0..l.d {
                for j in 0..l.k {
                    for q in 0..l.r {
                        delta[i * l.k + j] += a[i * l.r + q] * b[q * l.k + j];
                    }
                    delta[i * l.k + j] *= self.scale;
                }
            }
            let mut ps = 0.0;
            for (w, p) in delta.iter().zip(&l.hist) {
                ps += w * w * (1.0 - (self.alpha * w).tanh() * (self.alpha * p).tanh());
            }
            stab += ps / delta.len() as f64;
            let mut out = vec![0.0; self.n * l.k];
            for s in 0..self.n {
                for j in 0..l.k {
                    let mut z = l.bias[j];
                    for i in 0..l.d {
                        z += h[s * l.d + i] * (l.w0[i * l.k + j] + l.hist[i * l.k + j] + delta[i * l.k + j]);
                    }
                    out[s * l.k + j] = if li < last { z.tanh() } else { z };
                }
            }
            h = out;
        }
        let c = self.layers[last].k;
        let mut ce = 0.0;
        for s in 0..self.n {
            let row = &h[s * c..(s + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ce += lse - row[self.y[s]];
        }
        ce /= self.n as f64;
        if self.stability {
            ce + self.lambda * stab
        } else {
            ce
        }
    }

    pub fn fd_grad(&self, theta: &[f64], h: f64) -> Vec<f64> {
        let mut t = theta.to_vec();
        (0..theta.len())
            .map(|i| {
                t[i] = theta[i] + h;
                let p = self.loss(&t);
                t[i] = theta[i] - h;
                let m = self.loss(&t);
                t[i] = theta[i];
                (p - m) / (2.0 * h)
            })
            .collect()
    }
}

/// True when `a` and `b` agree to relative error `rel`, or both are below `abs` apart.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let d = (a - b).abs();
    d <= abs || d <= rel * a.abs().max(b.abs())
}

/// Accuracy matrix as nested vectors: `a[i][j]` for task `i` after stage `j`, `None` where absent.
pub type Grid = Vec<Vec<Option<f64>>>;

pub fn oracle_acc(a: &Grid, sizes: &[usize]) -> f64 {
    let n = a.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        num += sizes[i] as f64 * a[i][n - 1].unwrap();
        den += sizes[i] as f64;
    }
    num / den
}

pub fn oracle_bwt(a: &Grid) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n - 1 {
        s += a[i][n - 1].unwrap() - a[i][i].unwrap();
    }
    s / (n - 1) as f64
}

pub fn oracle_fwt(a: &Grid, scratch: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 1..n {
        s += a[i][i - 1].unwrap() - scratch[i];
    }
    s / (n - 1) as f64
}

pub fn oracle_fr(a: &Grid) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n - 1 {
        let mut peak = f64::NEG_INFINITY;
        for j in i..n {
            if a[i][j].unwrap() > peak {
                peak = a[i][j].unwrap();
            }
        }
        s += peak - a[i][n - 1].unwrap();
    }
    s / (n - 1) as f64
}

pub fn oracle_aaa(a: &Grid) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for j in 0..n {
        let mut stage = 0.0;
        for i in 0..=j {
            stage += a[i][j].unwrap();
        }
        total += stage / (j + 1) as f64;
    }
    total / n as f64
}

/// Outcome of one finite-difference gradient comparison.
pub struct GradCheck {
    pub entries: usize,
    pub failures: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub max_grad: f64,
}

/// Builds a random model with one frozen task and one active task, then
/// compares tape gradients of `L_f + λ L_s` with central differences of the
/// `f64` reference objective.
pub fn gradient_instance(seed: u64) -> GradCheck {
    use pslora::lora::{BaseModel, DenseModel, HistoryMode};
    use pslora::regularizers::RegularizerConfig;
    use pslora::trainer::build_objective;
    use pslora::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_in = rng.random_range(2..=6);
    let hidden = rng.random_range(2..=6);
    let classes = rng.random_range(2..=4);
    let rank = rng.random_range(1..=d_in.min(hidden).min(classes));
    let batch = rng.random_range(3..=8);
    let lambda = rng.random_range(0.1..2.0);
    let alpha = rng.random_range(0.5..3.0);
    let mut rand_m = |r: usize, c: usize, s: f32| Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0f32..1.0) * s);

    let base = BaseModel::freeze(DenseModel::init_mlp(d_in, hidden, classes, seed));
    let mut model = ContinualModel::new(base, 1.0, HistoryMode::Sum);
    let dims = [(d_in, hidden), (hidden, classes)];
    model.begin_task(1, rank, seed).unwrap();
    for (l, &(d, k)) in dims.iter().enumerate() {
        model
            .set_active_factors(l, rand_m(d, rank, 0.5), rand_m(rank, k, 0.5))
            .unwrap();
    }
    model.freeze_active().unwrap();
    model.begin_task(2, rank, seed + 1).unwrap();
    for (l, &(d, k)) in dims.iter().enumerate() {
        model
            .set_active_factors(l, rand_m(d, rank, 0.5), rand_m(rank, k, 0.5))
            .unwrap();
    }
    let x = rand_m(batch, d_in, 1.5);
    let y: Vec<usize> = (0..batch).map(|i| (i * 7 + seed as usize) % classes).collect();

    let reg = RegularizerConfig {
        lambda,
        alpha,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let obj = build_objective(&mut tape, &model, &x, &y, &reg, 2).unwrap();
    let grads = tape.grad(obj.total).unwrap();
    let analytic: Vec<f64> = obj
        .forward
        .factors
        .iter()
        .flat_map(|&(a, b)| to_f64(&grads.wrt(a)).into_iter().chain(to_f64(&grads.wrt(b))))
        .collect();

    let reference = RefObjective::from_model(&model, &x, &y, lambda, alpha, true);
    let theta = RefObjective::params(&model);
    let fd = reference.fd_grad(&theta, 1e-5);
    let mut failures = 0;
    let mut worst_rel: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut max_grad: f64 = 0.0;
    for (g, f) in analytic.iter().zip(&fd) {
        let d = (g - f).abs();
        worst_abs = worst_abs.max(d);
        max_grad = max_grad.max(f.abs());
        if d > 1e-6 {
            worst_rel = worst_rel.max(d / g.abs().max(f.abs()));
        }
        if !close(*g, *f, 1e-4, 1e-6) {
            failures += 1;
        }
    }
    GradCheck {
        entries: fd.len(),
        failures,
        worst_rel,
        worst_abs,
        max_grad,
    }
}

/// A random accuracy matrix with pre-task cells and scratch accuracies, plus its grid form.
pub struct MetricCase {
    pub matrix: pslora::AccuracyMatrix,
    pub grid: Grid,
    pub sizes: Vec<usize>,
    pub scratch: Vec<f64>,
}

pub fn random_metric_case(seed: u64) -> MetricCase {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=7);
    let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..1000)).collect();
    let scratch: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut grid: Grid = vec![vec![None; n]; n];
    let mut m = pslora::AccuracyMatrix::new(sizes.clone()).unwrap();
    for (i, row) in grid.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            if j + 1 >= i {
                let v = rng.random::<f64>();
                *cell = Some(v);
                m.set(i, j, v).unwrap();
            }
        }
    }
    m.set_scratch(scratch.clone()).unwrap();
    MetricCase {
        matrix: m,
        grid,
        sizes,
        scratch,
    }
}

/// Number of metric disagreements between the library and the loop oracles at tolerance `tol`.
pub fn metric_mismatches(c: &MetricCase, tol: f64) -> Vec<String> {
    use pslora::metrics::{aaa, bwt, final_acc, fr, fwt};
    let pairs = [
        ("acc", final_acc(&c.matrix).unwrap(), oracle_acc(&c.grid, &c.sizes)),
        ("bwt", bwt(&c.matrix).unwrap(), oracle_bwt(&c.grid)),
        ("fwt", fwt(&c.matrix).unwrap(), oracle_fwt(&c.grid, &c.scratch)),
        ("fr", fr(&c.matrix).unwrap(), oracle_fr(&c.grid)),
        ("aaa", aaa(&c.matrix).unwrap(), oracle_aaa(&c.grid)),
    ];
    pairs
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > tol)
        .map(|(name, got, want)| format!("{name}: {got} vs {want}"))
        .collect()
}

/// Hand-computed metric examples as `(label, computed, expected)`.
#[allow(clippy::vec_init_then_push)]
pub fn hand_metric_examples() -> Vec<(&'static str, f64, f64)> {
    use pslora::metrics::{aaa, bwt, final_acc, fr, fwt};
    use pslora::AccuracyMatrix;
    let up = |rows: &[Vec<f64>], sizes: Vec<usize>| AccuracyMatrix::from_upper(rows, sizes).unwrap();
    let mut out = Vec::new();
    out.push((
        "acc weighted",
        final_acc(&up(&[vec![0.9, 0.8], vec![0.6]], vec![100, 300])).unwrap(),
        0.65,
    ));
    out.push((
        "acc plain",
        final_acc(&up(&[vec![0.9, 0.8], vec![0.6]], vec![7, 7])).unwrap(),
        0.7,
    ));
    out.push(("acc single", final_acc(&up(&[vec![0.42]], vec![3])).unwrap(), 0.42));
    out.push((
        "bwt single term",
        bwt(&up(&[vec![0.9, 0.8], vec![0.5]], vec![1, 1])).unwrap(),
        -0.1,
    ));
    out.push((
        "bwt no drift",
        bwt(&up(&[vec![0.9, 0.9], vec![0.5]], vec![1, 1])).unwrap(),
        0.0,
    ));
    let three = up(&[vec![0.9, 0.85, 0.7], vec![0.8, 0.8], vec![0.6]], vec![1, 1, 1]);
    out.push(("bwt two terms", bwt(&three).unwrap(), -0.1));
    let mut two = up(&[vec![0.9, 0.8], vec![0.7]], vec![1, 1]);
    two.set(1, 0, 0.5).unwrap();
    two.set_scratch(vec![0.9, 0.6]).unwrap();
    out.push(("fwt single term", fwt(&two).unwrap(), -0.1));
    two.set_scratch(vec![0.9, 0.5]).unwrap();
    out.push(("fwt matched scratch", fwt(&two).unwrap(), 0.0));
    let mut t3 = three.clone();
    t3.set(1, 0, 0.4).unwrap();
    t3.set(2, 1, 0.3).unwrap();
    t3.set_scratch(vec![0.0, 0.5, 0.6]).unwrap();
    out.push(("fwt two terms", fwt(&t3).unwrap(), (-0.1 - 0.3) / 2.0));
    out.push((
        "fr single term",
        fr(&up(&[vec![0.9, 0.7], vec![0.5]], vec![1, 1])).unwrap(),
        0.2,
    ));
    out.push((
        "fr monotone",
        fr(&up(&[vec![0.5, 0.7], vec![0.5]], vec![1, 1])).unwrap(),
        0.0,
    ));
    let interior = up(&[vec![0.6, 0.9, 0.5], vec![0.7, 0.7], vec![0.1]], vec![1, 1, 1]);
    out.push(("fr interior peak", fr(&interior).unwrap(), 0.2));
    out.push(("aaa single", aaa(&up(&[vec![0.42]], vec![3])).unwrap(), 0.42));
    out.push((
        "aaa stages",
        aaa(&up(&[vec![0.9, 0.9], vec![0.7]], vec![1, 1])).unwrap(),
        0.85,
    ));
    let c = up(&[vec![0.3, 0.3, 0.3], vec![0.3, 0.3], vec![0.3]], vec![1, 2, 3]);
    out.push(("aaa constant", aaa(&c).unwrap(), 0.3));
    out
}

/// Outcome of one sequence run on the drop fixture.
#[derive(Clone, Copy, Debug)]
pub struct RunOutcome {
    pub final_acc: f64,
    pub fr: f64,
    /// Opposite-sign fraction of the last task's update against the history.
    pub opposite_fraction: f64,
}

/// The three ablation variants on one seed: no regularizer and no merge,
/// stability loss only, stability loss plus a final magnitude merge.
#[derive(Clone, Copy, Debug)]
pub struct FixtureRuns {
    pub seed: u64,
    pub inc_lora: RunOutcome,
    pub ps_only: RunOutcome,
    pub ps_merge: RunOutcome,
}

pub fn fixture_runs(seed: u64) -> FixtureRuns {
    use pslora::data::{make_sequence, pretrain_mixture, SequenceSpec};
    use pslora::merging::merged_weights;
    use pslora::metrics::{final_acc, fr};
    use pslora::trainer::{evaluate, pretrain_base, run_sequence, PretrainConfig};
    use pslora::{HistoryMode, MergePolicy, RegularizerConfig, TrainConfig};

    let spec = SequenceSpec::drop_fixture(seed);
    let tasks = make_sequence(&spec).unwrap();
    let pre = PretrainConfig {
        seed,
        ..Default::default()
    };
    let (base, _) = pretrain_base(&pretrain_mixture(&spec).unwrap(), spec.d_in, spec.n_classes, &pre).unwrap();
    let run = |lambda: f64, merge: bool| {
        let mut cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        cfg.reg = RegularizerConfig { lambda, ..cfg.reg };
        let out = run_sequence(&base, &tasks, &cfg, HistoryMode::Sum).unwrap();
        let mut m = out.acc_matrix.clone();
        if merge {
            let merged = merged_weights(&base, &out.flat_adapters(), &MergePolicy::default(), cfg.lora_scale).unwrap();
            let finals: Vec<f64> = tasks
                .tasks
                .iter()
                .map(|t| evaluate(&merged, &t.test).unwrap())
                .collect();
            m = m.with_final_column(&finals).unwrap();
        }
        RunOutcome {
            final_acc: final_acc(&m).unwrap(),
            fr: fr(&m).unwrap(),
            opposite_fraction: out.sign_stats.last().unwrap().opposite_fraction,
        }
    };
    let lambda = RegularizerConfig::default().lambda;
    FixtureRuns {
        seed,
        inc_lora: run(0.0, false),
        ps_only: run(lambda, false),
        ps_merge: run(lambda, true),
    }
}
