//! Sequential adapter training and accuracy-matrix assembly.
//!
//! For each task: fresh adapters, minibatch optimisation of
//! `L_f + λ Σ_layers L_s (+ μ · orth)` over the active factors only, freeze,
//! then evaluate every task seen so far plus the next one (for forward
//! transfer).

use std::num::NonZeroUsize;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{sign_split, SignSplit};
use crate::data::{Split, TaskDataset, TaskSequence};
use crate::error::{invalid, Error, Result};
use crate::lora::{BaseModel, ContinualModel, DenseModel, HistoryMode, LoraAdapter, TapeForward};
use crate::metrics::AccuracyMatrix;
use crate::nn::{Matrix, NodeId, Tape};
use crate::regularizers::{orth_loss_on_tape, ps_loss_on_tape, RegularizerConfig};
use crate::rng::{derive_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub rank: usize,
    pub lora_scale: f32,
    pub reg: RegularizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 5,
            batch_size: 32,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            rank: 4,
            lora_scale: 1.0,
            reg: RegularizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.rank == 0 {
            return invalid("batch_size and rank must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return invalid("learning_rate must be positive");
        }
        self.reg.validate()
    }
}

/// Adam or plain SGD over a fixed list of parameter matrices.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, shapes: &[usize]) -> Self {
        Self::with(cfg.optimizer, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, shapes)
    }

    pub fn with(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64, eps: f64, sizes: &[usize]) -> Self {
        Self {
            kind,
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Updates each `params[i]` in place with gradient `grads[i]`.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in data.iter_mut().zip(g.data()) {
                        *w -= (self.lr * gi as f64) as f32;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (w, &gi)) in data.iter_mut().zip(g.data()).enumerate() {
                        let gi = gi as f64;
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        *w -= (self.lr * mh / (vh.sqrt() + self.eps)) as f32;
                    }
                }
            }
        }
    }
}

/// Loss components recorded at one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub fine_tune: f64,
    pub stability: f64,
    pub orth: f64,
}

/// Tape nodes of one minibatch objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: NodeId,
    pub forward: TapeForward,
    pub fine_tune: NodeId,
    /// Unweighted stability sum over layers, `None` when inactive.
    pub stability: Option<NodeId>,
    /// Unweighted orthogonality sum, `None` when inactive.
    pub orth: Option<NodeId>,
}

/// Builds the training objective for one minibatch.
pub fn build_objective(
    tape: &mut Tape,
    model: &ContinualModel,
    x: &Matrix,
    y: &[usize],
    reg: &RegularizerConfig,
    task_index: usize,
) -> Result<Objective> {
    let fwd = model.forward_on_tape(tape, x)?;
    let l_f = tape.softmax_xent(fwd.logits, y)?;
    let mut total = l_f;
    let mut stability = None;
    if reg.stability_active(task_index) {
        let mut sum: Option<NodeId> = None;
        for (layer, &delta) in fwd.active_deltas.iter().enumerate() {
            let term = ps_loss_on_tape(tape, delta, &model.history()[layer], reg.alpha, reg.reduction)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, term)?,
                None => term,
            });
        }
        if let Some(s) = sum {
            let weighted = tape.scale(s, reg.lambda as f32);
            total = tape.add(total, weighted)?;
            stability = Some(s);
        }
    }
    let mut orth = None;
    if reg.orth_mu > 0.0 {
        let mut sum: Option<NodeId> = None;
        for (layer, &(a, _)) in fwd.factors.iter().enumerate() {
            let prev: Vec<Matrix> = model.frozen().iter().map(|t| t[layer].a().clone()).collect();
            if let Some(term) = orth_loss_on_tape(tape, a, &prev)? {
                sum = Some(match sum {
                    Some(s) => tape.add(s, term)?,
                    None => term,
                });
            }
        }
        if let Some(s) = sum {
            let weighted = tape.scale(s, reg.orth_mu as f32);
            total = tape.add(total, weighted)?;
            orth = Some(s);
        }
    }
    Ok(Objective {
        total,
        forward: fwd,
        fine_tune: l_f,
        stability,
        orth,
    })
}

/// Optimises the active adapters of `model` on `dataset`, then freezes them.
///
/// `task_index` is 1-based. Returns the trained adapters (one per layer) and
/// the per-step loss trace.
pub fn train_task(
    model: &mut ContinualModel,
    task_index: usize,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<(Vec<LoraAdapter>, Vec<StepLoss>)> {
    cfg.validate()?;
    let layers = model.active().len();
    if layers == 0 {
        return invalid("train_task needs freshly initialised active adapters");
    }
    let mut params: Vec<Matrix> = model
        .active()
        .iter()
        .flat_map(|a| [a.a().clone(), a.b().clone()])
        .collect();
    let sizes: Vec<usize> = params.iter().map(Matrix::len).collect();
    let mut opt = Optimizer::new(cfg, &sizes);
    let mut rng = stream(cfg.seed, &[0x5_4FF1E, task_index as u64]);
    let n = dataset.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::new();
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs_per_task {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = dataset.train.x.select_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| dataset.train.y[i]).collect();
            let mut tape = Tape::new();
            let obj = build_objective(&mut tape, model, &x, &y, &cfg.reg, task_index)?;
            let loss = tape.value(obj.total).item()? as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { task: task_index, step });
            }
            let grads = tape.grad(obj.total)?;
            let gs: Vec<Matrix> = obj
                .forward
                .factors
                .iter()
                .flat_map(|&(a, b)| [grads.wrt(a), grads.wrt(b)])
                .collect();
            opt.step(&mut params, &gs);
            for l in 0..layers {
                model.set_active_factors(l, params[2 * l].clone(), params[2 * l + 1].clone())?;
            }
            let scalar = |id: Option<NodeId>| id.map(|i| tape.value(i).data()[0] as f64).unwrap_or(0.0);
            trace.push(StepLoss {
                total: loss,
                fine_tune: tape.value(obj.fine_tune).data()[0] as f64,
                stability: scalar(obj.stability),
                orth: scalar(obj.orth),
            });
            step += 1;
        }
    }
    let adapters = model.freeze_active()?;
    Ok((adapters, trace))
}

/// Number of evaluation threads: `PSLORA_THREADS` if set, else available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("PSLORA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(NonZeroUsize::get).unwrap_or(1))
}

/// Fraction of rows whose arg-max logit (lowest index on ties) equals the label.
pub fn evaluate(model: &DenseModel, split: &Split) -> Result<f64> {
    evaluate_with_threads(model, split, eval_threads())
}

pub fn evaluate_with_threads(model: &DenseModel, split: &Split, threads: usize) -> Result<f64> {
    let n = split.len();
    if n == 0 {
        return invalid("cannot evaluate an empty split");
    }
    let threads = threads.clamp(1, n);
    let chunk = n.div_ceil(threads);
    let count_chunk = |start: usize| -> Result<usize> {
        let end = (start + chunk).min(n);
        let x = split.x.slice_rows(start, end)?;
        let pred = model.logits(&x)?.argmax_rows();
        Ok(pred.iter().zip(&split.y[start..end]).filter(|(p, y)| p == y).count())
    };
    let correct: usize = if threads == 1 {
        count_chunk(0)?
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|st| s.spawn(move || count_chunk(st)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .sum::<Result<usize>>()
        })?
    };
    Ok(correct as f64 / n as f64)
}

/// Same/opposite sign fractions of a task's delta against the history it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignStats {
    /// 1-based task index.
    pub task: usize,
    pub per_layer: Vec<(f64, f64)>,
    /// Fractions over all injected entries pooled across layers.
    pub same_fraction: f64,
    pub opposite_fraction: f64,
}

impl SignStats {
    pub fn compute(task: usize, deltas: &[Matrix], history: &[Matrix]) -> Result<Self> {
        let mut per_layer = Vec::new();
        let (mut same, mut opp, mut total) = (0usize, 0usize, 0usize);
        for (d, h) in deltas.iter().zip(history) {
            let s: SignSplit = sign_split(d, h, 100.0)?;
            per_layer.push((s.same_fraction, s.opposite_fraction));
            same += s.same_count();
            opp += s.opposite_count();
            total += s.selected;
        }
        Ok(Self {
            task,
            per_layer,
            same_fraction: same as f64 / total as f64,
            opposite_fraction: opp as f64 / total as f64,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    /// `adapters[t][layer]` for task `t` (0-based).
    pub adapters: Vec<Vec<LoraAdapter>>,
    pub acc_matrix: AccuracyMatrix,
    pub loss_traces: Vec<Vec<StepLoss>>,
    pub sign_stats: Vec<SignStats>,
    /// The model after the last task, adapters frozen.
    pub model: ContinualModel,
}

impl RunArtifacts {
    /// All adapters in task order, flattened.
    pub fn flat_adapters(&self) -> Vec<LoraAdapter> {
        self.adapters.iter().flatten().cloned().collect()
    }
}

/// Trains `tasks` in order and fills the accuracy matrix after each task.
pub fn run_sequence(
    base: &BaseModel,
    tasks: &TaskSequence,
    cfg: &TrainConfig,
    mode: HistoryMode,
) -> Result<RunArtifacts> {
    if tasks.is_empty() {
        return invalid("run_sequence needs at least one task");
    }
    cfg.validate()?;
    let n = tasks.len();
    let mut model = ContinualModel::new(base.clone(), cfg.lora_scale, mode);
    let mut acc = AccuracyMatrix::new(tasks.test_sizes())?;
    let mut adapters = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    let mut signs = Vec::with_capacity(n);

    for (t, task) in tasks.tasks.iter().enumerate() {
        let task_index = t + 1;
        let history_before: Vec<Matrix> = model.history().to_vec();
        model.begin_task(task_index as u32, cfg.rank, cfg.seed)?;
        let (trained, trace) = train_task(&mut model, task_index, task, cfg)?;
        let deltas: Vec<Matrix> = trained.iter().map(|a| a.delta().scale(cfg.lora_scale)).collect();
        signs.push(SignStats::compute(task_index, &deltas, &history_before)?);
        adapters.push(trained);
        traces.push(trace);

        let eff = model.effective()?;
        for i in 0..=t {
            acc.set(i, t, evaluate(&eff, &tasks.tasks[i].test)?)?;
        }
        if t + 1 < n {
            acc.set(t + 1, t, evaluate(&eff, &tasks.tasks[t + 1].test)?)?;
        }
    }
    Ok(RunArtifacts {
        adapters,
        acc_matrix: acc,
        loss_traces: traces,
        sign_stats: signs,
        model,
    })
}

/// Accuracy of a fresh adapter trained on each task alone over the frozen base.
pub fn scratch_accuracies(base: &BaseModel, tasks: &TaskSequence, cfg: &TrainConfig) -> Result<Vec<f64>> {
    tasks
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let mut model = ContinualModel::new(base.clone(), cfg.lora_scale, HistoryMode::Sum);
            let single = TrainConfig {
                seed: derive_seed(cfg.seed, &[0x5C7A, t as u64]),
                ..cfg.clone()
            };
            model.begin_task(1, cfg.rank, single.seed)?;
            train_task(&mut model, 1, task, &single)?;
            evaluate(&model.effective()?, &task.test)
        })
        .collect()
}

/// Settings for training the base network before it is frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Trains a fresh two-layer network on the pooled training splits and freezes it.
///
/// Returns the frozen base and its accuracy on the pooled test splits.
pub fn pretrain_base(
    mixture: &TaskSequence,
    d_in: usize,
    classes: usize,
    cfg: &PretrainConfig,
) -> Result<(BaseModel, f64)> {
    let trains: Vec<&Split> = mixture.tasks.iter().map(|t| &t.train).collect();
    let tests: Vec<&Split> = mixture.tasks.iter().map(|t| &t.test).collect();
    let train = Split::concat(&trains)?;
    let test = Split::concat(&tests)?;
    let mut net = DenseModel::init_mlp(d_in, cfg.hidden, classes, cfg.seed);
    let sizes: Vec<usize> = net.layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect();
    let mut opt = Optimizer::with(OptimizerKind::Adam, cfg.learning_rate, 0.9, 0.999, 1e-8, &sizes);
    let mut rng = stream(cfg.seed, &[0x9_7E7A]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.x.select_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| train.y[i]).collect();
            let mut tape = Tape::new();
            let (logits, ids) = net.logits_on_tape(&mut tape, &x)?;
            let loss = tape.softmax_xent(logits, &y)?;
            if !tape.value(loss).is_finite() {
                return Err(Error::NonFiniteLoss { task: 0, step: 0 });
            }
            let g = tape.grad(loss)?;
            let grads: Vec<Matrix> = ids.iter().flat_map(|&(w, b)| [g.wrt(w), g.wrt(b)]).collect();
            let mut params: Vec<Matrix> = net
                .layers
                .iter()
                .flat_map(|l| [l.weight.clone(), l.bias.clone()])
                .collect();
            opt.step(&mut params, &grads);
            for (l, pair) in net.layers.iter_mut().zip(params.chunks(2)) {
                l.weight = pair[0].clone();
                l.bias = pair[1].clone();
            }
        }
    }
    let acc = evaluate(&net, &test)?;
    Ok((BaseModel::freeze(net), acc))
}
