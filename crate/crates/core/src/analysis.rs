//! Diagnostics over trained deltas: sign decomposition against the
//! accumulated history, subset evaluation, pooled shift histograms,
//! Frobenius cosine drift, and the second-order forgetting bound.

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Split, TaskDataset};
use crate::error::{invalid, Error, Result};
use crate::lora::{Activation, BaseModel, ContinualModel, DenseModel, HistoryMode, Linear, LoraAdapter};
use crate::nn::Matrix;
use crate::trainer::{evaluate, train_task, TrainConfig};

/// Sign decomposition of the `k%` smallest-magnitude entries of a delta.
#[derive(Clone, Debug, PartialEq)]
pub struct SignSplit {
    pub shape: (usize, usize),
    pub same_mask: Vec<bool>,
    pub opposite_mask: Vec<bool>,
    /// Number of selected entries (the denominator of both fractions).
    pub selected: usize,
    pub same_fraction: f64,
    pub opposite_fraction: f64,
}

impl SignSplit {
    pub fn same_count(&self) -> usize {
        self.same_mask.iter().filter(|&&b| b).count()
    }

    pub fn opposite_count(&self) -> usize {
        self.opposite_mask.iter().filter(|&&b| b).count()
    }
}

/// Indices of the `fraction` of entries with the smallest (or largest) magnitude.
fn magnitude_select(values: &[f32], fraction: f64, largest: bool) -> Vec<usize> {
    let n = values.len();
    let keep = ((fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| {
        let (a, b) = (values[i].abs(), values[j].abs());
        let ord = if largest { b.partial_cmp(&a) } else { a.partial_cmp(&b) };
        ord.unwrap_or(Ordering::Equal).then(i.cmp(&j))
    });
    idx.truncate(keep);
    idx
}

pub fn sign_split(delta_t: &Matrix, cum_prev: &Matrix, k_percent: f64) -> Result<SignSplit> {
    if delta_t.shape() != cum_prev.shape() {
        return Err(Error::ShapeMismatch {
            op: "sign_split",
            left: delta_t.shape(),
            right: cum_prev.shape(),
        });
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return invalid(format!("k_percent must be in (0, 100], got {k_percent}"));
    }
    let n = delta_t.len();
    let chosen = magnitude_select(delta_t.data(), k_percent / 100.0, false);
    let mut same = vec![false; n];
    let mut opp = vec![false; n];
    for &i in &chosen {
        let prod = delta_t.data()[i].signum() * cum_prev.data()[i].signum();
        if delta_t.data()[i] == 0.0 || cum_prev.data()[i] == 0.0 {
            continue;
        }
        if prod > 0.0 {
            same[i] = true;
        } else {
            opp[i] = true;
        }
    }
    let sel = chosen.len();
    let denom = sel.max(1) as f64;
    let mut out = SignSplit {
        shape: delta_t.shape(),
        same_mask: same,
        opposite_mask: opp,
        selected: sel,
        same_fraction: 0.0,
        opposite_fraction: 0.0,
    };
    out.same_fraction = out.same_count() as f64 / denom;
    out.opposite_fraction = out.opposite_count() as f64 / denom;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetVariant {
    Same,
    Opposite,
    Both,
}

impl SubsetVariant {
    pub const ALL: [SubsetVariant; 3] = [SubsetVariant::Same, SubsetVariant::Opposite, SubsetVariant::Both];

    pub fn name(self) -> &'static str {
        match self {
            SubsetVariant::Same => "same",
            SubsetVariant::Opposite => "opposite",
            SubsetVariant::Both => "both",
        }
    }
}

/// `delta` with every entry outside the chosen subset zeroed.
pub fn masked_delta(delta: &Matrix, split: &SignSplit, variant: SubsetVariant) -> Result<Matrix> {
    if split.shape != delta.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_delta",
            left: delta.shape(),
            right: split.shape,
        });
    }
    let data = delta
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let keep = match variant {
                SubsetVariant::Same => split.same_mask[i],
                SubsetVariant::Opposite => split.opposite_mask[i],
                SubsetVariant::Both => split.same_mask[i] || split.opposite_mask[i],
            };
            if keep {
                v
            } else {
                0.0
            }
        })
        .collect();
    Matrix::new(delta.rows(), delta.cols(), data)
}

/// Dense model with weights `(W_0 + frozen_cum) + masked(delta_t)` per layer.
pub fn subset_model(
    base: &BaseModel,
    frozen_cum: &[Matrix],
    delta_t: &[Matrix],
    splits: &[SignSplit],
    variant: SubsetVariant,
) -> Result<DenseModel> {
    let net = base.net();
    if frozen_cum.len() != net.layers.len() || delta_t.len() != net.layers.len() || splits.len() != net.layers.len() {
        return invalid("eval_subset needs one history, delta and split per layer");
    }
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let w = l
                .weight
                .add(&frozen_cum[i])?
                .add(&masked_delta(&delta_t[i], &splits[i], variant)?)?;
            Linear::new(l.id.clone(), w, l.bias.clone())
        })
        .collect::<Result<_>>()?;
    DenseModel::new(layers, net.activation)
}

/// Mean accuracy over `probes` of the model carrying only the chosen subset of `delta_t`.
pub fn eval_subset(
    base: &BaseModel,
    frozen_cum: &[Matrix],
    delta_t: &[Matrix],
    splits: &[SignSplit],
    variant: SubsetVariant,
    probes: &[&Split],
) -> Result<f64> {
    if probes.is_empty() {
        return invalid("eval_subset needs at least one probe set");
    }
    let model = subset_model(base, frozen_cum, delta_t, splits, variant)?;
    let mut total = 0.0;
    for p in probes {
        total += evaluate(&model, p)?;
    }
    Ok(total / probes.len() as f64)
}

/// Non-overlapping `window x window` mean pooling; edge cells average what is available.
pub fn average_pool(m: &Matrix, window: usize) -> Result<Matrix> {
    if window == 0 {
        return invalid("pool window must be at least 1");
    }
    let pr = m.rows().div_ceil(window);
    let pc = m.cols().div_ceil(window);
    let mut out = Matrix::zeros(pr, pc);
    for r in 0..pr {
        for c in 0..pc {
            let (r0, r1) = (r * window, ((r + 1) * window).min(m.rows()));
            let (c0, c1) = (c * window, ((c + 1) * window).min(m.cols()));
            let mut s = 0.0f64;
            for i in r0..r1 {
                for j in c0..c1 {
                    s += m.get(i, j) as f64;
                }
            }
            out.set(r, c, (s / ((r1 - r0) * (c1 - c0)) as f64) as f32);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub task_index: usize,
    pub selection_fraction: f64,
    /// The pooled values that were binned.
    pub selected: Vec<f32>,
}

pub const DEFAULT_BINS: usize = 41;

/// Pooled entries of `cum_delta` with the largest magnitudes.
pub fn pooled_selection(cum_delta: &Matrix, top_fraction: f64, pool_window: usize) -> Result<Vec<f32>> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return invalid(format!("top_fraction must be in (0, 1], got {top_fraction}"));
    }
    let pooled = average_pool(cum_delta, pool_window)?;
    let mut idx = magnitude_select(pooled.data(), top_fraction, true);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| pooled.data()[i]).collect())
}

/// Histogram over `[-half_range, half_range]` with `bins` uniform bins.
pub fn histogram(values: &[f32], half_range: f64, bins: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if bins == 0 {
        return invalid("need at least one bin");
    }
    let m = if half_range > 0.0 && half_range.is_finite() {
        half_range
    } else {
        1.0
    };
    let width = 2.0 * m / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| -m + i as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let pos = ((v as f64 + m) / width).floor();
        let b = if pos.is_nan() {
            0
        } else {
            (pos.max(0.0) as usize).min(bins - 1)
        };
        counts[b] += 1;
    }
    Ok((edges, counts))
}

/// Pool, keep the top fraction by magnitude, then bin over `[-m, m]` where `m`
/// is the largest selected magnitude.
pub fn shift_histogram(cum_delta: &Matrix, top_fraction: f64, pool_window: usize) -> Result<ShiftHistogram> {
    let selected = pooled_selection(cum_delta, top_fraction, pool_window)?;
    let m = selected.iter().fold(0.0f32, |a, v| a.max(v.abs())) as f64;
    shift_histogram_in_range(cum_delta, top_fraction, pool_window, m, DEFAULT_BINS, 0)
}

/// As [`shift_histogram`] but with a caller-supplied half range, so several
/// tasks share one axis.
pub fn shift_histogram_in_range(
    cum_delta: &Matrix,
    top_fraction: f64,
    pool_window: usize,
    half_range: f64,
    bins: usize,
    task_index: usize,
) -> Result<ShiftHistogram> {
    let selected = pooled_selection(cum_delta, top_fraction, pool_window)?;
    let (bin_edges, counts) = histogram(&selected, half_range, bins)?;
    Ok(ShiftHistogram {
        bin_edges,
        counts,
        task_index,
        selection_fraction: top_fraction,
        selected,
    })
}

/// `Tr(aᵀb) / (‖a‖_F ‖b‖_F)`.
pub fn frob_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    let dot = a.frob_dot(b)?;
    let (na, nb) = (a.frob_norm(), b.frob_norm());
    if na == 0.0 || nb == 0.0 {
        return invalid("similarity is undefined for a zero matrix");
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Outcome of comparing an actual loss increase with `½ λ_max ‖θ − θ*‖²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorCheck {
    pub delta_loss: f64,
    pub bound: f64,
    pub lambda_max: f64,
    pub holds: bool,
}

/// Settings for the Hessian eigenvalue estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HessianOptions {
    pub fd_step: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Relative slack allowed for higher-order terms.
    pub slack: f64,
}

impl Default for HessianOptions {
    fn default() -> Self {
        Self {
            fd_step: 1e-4,
            rel_tol: 1e-6,
            max_iter: 1000,
            seed: 0,
            slack: 1e-3,
        }
    }
}

/// Hessian-vector product of a black-box loss by central finite differences.
///
/// Uses the four-point mixed second difference along `e_i` and `v`, so it
/// costs `4n` loss evaluations.
pub fn fd_hessian_vector<F: Fn(&[f64]) -> f64>(loss: &F, theta: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vn == 0.0 {
        return vec![0.0; theta.len()];
    }
    let mut probe = theta.to_vec();
    let eval = |ei: usize, si: f64, sv: f64, probe: &mut Vec<f64>| -> f64 {
        for (p, (&t, &vi)) in probe.iter_mut().zip(theta.iter().zip(v)) {
            *p = t + sv * h * vi / vn;
        }
        probe[ei] += si * h;
        loss(probe)
    };
    (0..theta.len())
        .map(|i| {
            let pp = eval(i, 1.0, 1.0, &mut probe);
            let pm = eval(i, 1.0, -1.0, &mut probe);
            let mp = eval(i, -1.0, 1.0, &mut probe);
            let mm = eval(i, -1.0, -1.0, &mut probe);
            vn * (pp - pm - mp + mm) / (4.0 * h * h)
        })
        .collect()
}

fn power_iterate(hv: &dyn Fn(&[f64]) -> Vec<f64>, n: usize, shift: f64, opts: &HessianOptions) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut prev = f64::NAN;
    for _ in 0..opts.max_iter {
        let mut w = hv(&v);
        if shift != 0.0 {
            w.iter_mut().zip(&v).for_each(|(wi, vi)| *wi -= shift * vi);
        }
        let lambda: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn == 0.0 {
            return Ok(0.0);
        }
        if (lambda - prev).abs() <= opts.rel_tol * lambda.abs().max(f64::MIN_POSITIVE) {
            return Ok(lambda);
        }
        prev = lambda;
        v = w.into_iter().map(|x| x / wn).collect();
    }
    Err(Error::NoConvergence(opts.max_iter))
}

/// Largest algebraic eigenvalue of the finite-difference Hessian at `theta`.
pub fn hessian_top_eigenvalue<F: Fn(&[f64]) -> f64>(loss: &F, theta: &[f64], opts: &HessianOptions) -> Result<f64> {
    let hv = |v: &[f64]| fd_hessian_vector(loss, theta, v, opts.fd_step);
    top_eigenvalue_of(&hv, theta.len(), opts)
}

/// Compares `loss(θ) − loss(θ*)` with `½ λ_max ‖θ − θ*‖²`.
pub fn taylor_bound_check<F: Fn(&[f64]) -> f64>(loss: F, theta_star: &[f64], theta: &[f64]) -> Result<TaylorCheck> {
    taylor_bound_check_with(&loss, theta_star, theta, &HessianOptions::default())
}

pub fn taylor_bound_check_with<F: Fn(&[f64]) -> f64>(
    loss: &F,
    theta_star: &[f64],
    theta: &[f64],
    opts: &HessianOptions,
) -> Result<TaylorCheck> {
    let lambda_max = hessian_top_eigenvalue(loss, theta_star, opts)?;
    Ok(bound_from_eigenvalue(loss, theta_star, theta, lambda_max, opts.slack))
}

/// Bound check with a precomputed `λ_max`, for sweeping many perturbations.
pub fn bound_from_eigenvalue<F: Fn(&[f64]) -> f64>(
    loss: &F,
    theta_star: &[f64],
    theta: &[f64],
    lambda_max: f64,
    slack: f64,
) -> TaylorCheck {
    let delta_loss = loss(theta) - loss(theta_star);
    let dist_sq: f64 = theta.iter().zip(theta_star).map(|(a, b)| (a - b).powi(2)).sum();
    let bound = 0.5 * lambda_max * dist_sq;
    let holds = delta_loss <= bound + slack * bound.abs();
    TaylorCheck {
        delta_loss,
        bound,
        lambda_max,
        holds,
    }
}

/// Task loss as a function of one task's flattened adapter factors, in `f64`.
///
/// The parameter vector is `[A_1, B_1, A_2, B_2, ...]` row-major, one pair per
/// injected layer. `history` holds the frozen contribution per layer.
#[derive(Clone, Debug)]
pub struct AdapterLoss {
    weights: Vec<(Vec<f64>, usize, usize)>,
    biases: Vec<Vec<f64>>,
    ranks: Vec<usize>,
    activation: Activation,
    scale: f64,
    x: Vec<f64>,
    rows: usize,
    y: Vec<usize>,
}

impl AdapterLoss {
    pub fn new(base: &BaseModel, history: &[Matrix], ranks: &[usize], scale: f32, data: &Split) -> Result<Self> {
        let net = base.net();
        if history.len() != net.layers.len() || ranks.len() != net.layers.len() {
            return invalid("need one history matrix and rank per layer");
        }
        let weights = net
            .layers
            .iter()
            .zip(history)
            .map(|(l, h)| {
                let w = l.weight.add(h)?;
                Ok((w.data().iter().map(|&v| v as f64).collect(), w.rows(), w.cols()))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            weights,
            biases: net
                .layers
                .iter()
                .map(|l| l.bias.data().iter().map(|&v| v as f64).collect())
                .collect(),
            ranks: ranks.to_vec(),
            activation: net.activation,
            scale: scale as f64,
            x: data.x.data().iter().map(|&v| v as f64).collect(),
            rows: data.len(),
            y: data.y.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.ranks)
            .map(|((_, d, k), r)| d * r + r * k)
            .sum()
    }

    pub fn flatten(adapters: &[LoraAdapter]) -> Vec<f64> {
        adapters
            .iter()
            .flat_map(|a| {
                a.a()
                    .data()
                    .iter()
                    .chain(a.b().data())
                    .map(|&v| v as f64)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Effective per-layer weights at `theta`.
    fn weights_at(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(theta.len(), self.dim(), "parameter vector length");
        let mut off = 0;
        self.weights
            .iter()
            .zip(&self.ranks)
            .map(|((w0, d, k), &r)| {
                let (d, k) = (*d, *k);
                let a = &theta[off..off + d * r];
                let b = &theta[off + d * r..off + d * r + r * k];
                off += d * r + r * k;
                let mut w = w0.clone();
                for i in 0..d {
                    for q in 0..r {
                        let aiq = self.scale * a[i * r + q];
                        for j in 0..k {
                            w[i * k + j] += aiq * b[q * k + j];
                        }
                    }
                }
                w
            })
            .collect()
    }

    /// Layer inputs followed by the logits.
    fn activations(&self, ws: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let last = self.weights.len() - 1;
        let mut acts = vec![self.x.clone()];
        for (li, w) in ws.iter().enumerate() {
            let (_, d, k) = self.weights[li];
            let h = &acts[li];
            let mut next = vec![0.0; self.rows * k];
            for n in 0..self.rows {
                let out = &mut next[n * k..(n + 1) * k];
                out.copy_from_slice(&self.biases[li]);
                for i in 0..d {
                    let hi = h[n * d + i];
                    for j in 0..k {
                        out[j] += hi * w[i * k + j];
                    }
                }
                if li < last && self.activation == Activation::Tanh {
                    out.iter_mut().for_each(|v| *v = v.tanh());
                }
            }
            acts.push(next);
        }
        acts
    }

    /// Mean cross-entropy at parameter vector `theta`.
    pub fn eval(&self, theta: &[f64]) -> f64 {
        let acts = self.activations(&self.weights_at(theta));
        let logits = acts.last().expect("at least one layer");
        let width = logits.len() / self.rows;
        let mut total = 0.0;
        for n in 0..self.rows {
            let row = &logits[n * width..(n + 1) * width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[self.y[n]];
        }
        total / self.rows as f64
    }

    /// Gradient of [`AdapterLoss::eval`] by hand-written backpropagation.
    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let ws = self.weights_at(theta);
        let acts = self.activations(&ws);
        let nl = self.weights.len();
        let logits = &acts[nl];
        let width = logits.len() / self.rows;
        let mut dz = vec![0.0; logits.len()];
        for n in 0..self.rows {
            let row = &logits[n * width..(n + 1) * width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..width {
                let p = (row[j] - max).exp() / z;
                let t = if j == self.y[n] { 1.0 } else { 0.0 };
                dz[n * width + j] = (p - t) / self.rows as f64;
            }
        }
        let mut dws: Vec<Vec<f64>> = vec![Vec::new(); nl];
        for li in (0..nl).rev() {
            let (_, d, k) = &self.weights[li];
            let (d, k) = (*d, *k);
            let h = &acts[li];
            let mut dw = vec![0.0; d * k];
            for n in 0..self.rows {
                for i in 0..d {
                    let hi = h[n * d + i];
                    for j in 0..k {
                        dw[i * k + j] += hi * dz[n * k + j];
                    }
                }
            }
            if li > 0 {
                let mut dh = vec![0.0; self.rows * d];
                for n in 0..self.rows {
                    for i in 0..d {
                        let mut s = 0.0;
                        for j in 0..k {
                            s += dz[n * k + j] * ws[li][i * k + j];
                        }
                        let hv = h[n * d + i];
                        dh[n * d + i] = if self.activation == Activation::Tanh {
                            s * (1.0 - hv * hv)
                        } else {
                            s
                        };
                    }
                }
                dz = dh;
            }
            dws[li] = dw;
        }
        let mut out = Vec::with_capacity(theta.len());
        let mut off = 0;
        for (li, ((_, d, k), &r)) in self.weights.iter().zip(&self.ranks).enumerate() {
            let (d, k) = (*d, *k);
            let a = &theta[off..off + d * r];
            let b = &theta[off + d * r..off + d * r + r * k];
            off += d * r + r * k;
            let dw = &dws[li];
            for i in 0..d {
                for q in 0..r {
                    let s: f64 = (0..k).map(|j| dw[i * k + j] * b[q * k + j]).sum();
                    out.push(self.scale * s);
                }
            }
            for q in 0..r {
                for j in 0..k {
                    let s: f64 = (0..d).map(|i| a[i * r + q] * dw[i * k + j]).sum();
                    out.push(self.scale * s);
                }
            }
        }
        out
    }
}

/// Full-batch gradient descent with a backtracking step on `loss` from
/// `theta`, until the gradient norm drops below `tol` or `max_steps` is
/// reached. Returns the final gradient norm.
pub fn descend(loss: &AdapterLoss, theta: &mut [f64], max_steps: usize, tol: f64) -> f64 {
    let mut step = 1.0;
    let mut value = loss.eval(theta);
    let mut g = loss.grad(theta);
    for _ in 0..max_steps {
        let gg: f64 = g.iter().map(|x| x * x).sum();
        if gg.sqrt() <= tol {
            break;
        }
        loop {
            let trial: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - step * gi).collect();
            let v = loss.eval(&trial);
            if v <= value - 0.5 * step * gg {
                theta.copy_from_slice(&trial);
                value = v;
                step *= 2.0;
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                return gg.sqrt();
            }
        }
        g = loss.grad(theta);
    }
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Hessian-vector product as a central difference of an exact gradient.
pub fn fd_gradient_hessian_vector<G: Fn(&[f64]) -> Vec<f64>>(grad: &G, theta: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vn == 0.0 {
        return vec![0.0; theta.len()];
    }
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, vi)| t + h * vi / vn).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, vi)| t - h * vi / vn).collect();
    grad(&plus)
        .into_iter()
        .zip(grad(&minus))
        .map(|(p, m)| vn * (p - m) / (2.0 * h))
        .collect()
}

/// Top eigenvalue from an arbitrary Hessian-vector operator.
pub fn top_eigenvalue_of(hv: &dyn Fn(&[f64]) -> Vec<f64>, n: usize, opts: &HessianOptions) -> Result<f64> {
    let dominant = power_iterate(hv, n, 0.0, opts)?;
    if dominant >= 0.0 {
        return Ok(dominant);
    }
    // The dominant eigenvalue is negative; shift it to zero to expose the top of the spectrum.
    Ok(power_iterate(hv, n, dominant, opts)? + dominant)
}

/// Result of probing the forgetting bound around trained adapter factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorStudy {
    pub lambda_max: f64,
    pub grad_norm: f64,
    pub checks: Vec<TaylorCheck>,
    pub holds_fraction: f64,
}

/// Evaluates the bound at `n_perturb` random points within `radius` of `theta_star`.
pub fn taylor_study(
    loss: &AdapterLoss,
    theta_star: &[f64],
    n_perturb: usize,
    radius: f64,
    opts: &HessianOptions,
) -> Result<TaylorStudy> {
    let grad = |t: &[f64]| loss.grad(t);
    let hv = |v: &[f64]| fd_gradient_hessian_vector(&grad, theta_star, v, opts.fd_step);
    let lambda_max = top_eigenvalue_of(&hv, theta_star.len(), opts)?;
    let grad_norm = loss.grad(theta_star).iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7A_71_0B);
    let f = |t: &[f64]| loss.eval(t);
    let checks: Vec<TaylorCheck> = (0..n_perturb)
        .map(|_| {
            let mut dir: Vec<f64> = (0..theta_star.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let r = radius * rand::Rng::random_range(&mut rng, f64::EPSILON..=1.0);
            dir.iter_mut().for_each(|x| *x *= r / norm);
            let theta: Vec<f64> = theta_star.iter().zip(&dir).map(|(a, b)| a + b).collect();
            bound_from_eigenvalue(&f, theta_star, &theta, lambda_max, opts.slack)
        })
        .collect();
    let holds = checks.iter().filter(|c| c.holds).count();
    Ok(TaylorStudy {
        lambda_max,
        grad_norm,
        holds_fraction: holds as f64 / n_perturb.max(1) as f64,
        checks,
    })
}

/// Settings for [`trained_taylor_study`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaylorStudyConfig {
    /// Gradient-norm tolerance for the full-batch descent that locates `θ*`.
    pub descent_tol: f64,
    pub descent_max_steps: usize,
    pub n_perturb: usize,
    pub radius: f64,
    pub hessian: HessianOptions,
}

impl Default for TaylorStudyConfig {
    fn default() -> Self {
        Self {
            descent_tol: 1e-4,
            descent_max_steps: 20_000,
            n_perturb: 100,
            radius: 1e-2,
            hessian: HessianOptions::default(),
        }
    }
}

/// Trains one adapter on `task` over `base`, refines it to a stationary point
/// of the full training loss, and probes the bound around it.
pub fn trained_taylor_study(
    base: &BaseModel,
    task: &TaskDataset,
    cfg: &TrainConfig,
    study: &TaylorStudyConfig,
) -> Result<TaylorStudy> {
    let mut model = ContinualModel::new(base.clone(), cfg.lora_scale, HistoryMode::Sum);
    model.begin_task(1, cfg.rank, cfg.seed)?;
    let (adapters, _) = train_task(&mut model, 1, task, cfg)?;
    let history: Vec<Matrix> = base
        .net()
        .layers
        .iter()
        .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
        .collect();
    let ranks = vec![cfg.rank; history.len()];
    let loss = AdapterLoss::new(base, &history, &ranks, cfg.lora_scale, &task.train)?;
    let mut theta_star = AdapterLoss::flatten(&adapters);
    descend(&loss, &mut theta_star, study.descent_max_steps, study.descent_tol);
    taylor_study(&loss, &theta_star, study.n_perturb, study.radius, &study.hessian)
}
