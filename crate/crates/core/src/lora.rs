//! Low-rank adapters over a frozen two-layer perceptron.
//!
//! Each task `t` trains one adapter pair `(A_t, B_t)` per injected layer; the
//! effective weight during task `t` is `W_0 + history + s * A_t B_t`, where
//! `history` is the contribution of the frozen adapters (their sum, or their
//! running merge under per-task merge cadence) and `s` is the LoRA scale.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::merging::MergePolicy;
use crate::nn::{Matrix, NodeId, Tape};
use crate::rng::stream;

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => invalid(format!("unknown activation {other:?}")),
        }
    }

    fn apply(self, m: Matrix) -> Matrix {
        match self {
            Activation::Tanh => m.tanh_map(),
            Activation::Identity => m,
        }
    }
}

/// Affine layer `x W + b` with `W: d x k` and `b: 1 x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub id: String,
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new(id: impl Into<String>, weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: weight.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self {
            id: id.into(),
            weight,
            bias,
        })
    }
}

/// A plain multilayer perceptron: the activation follows every layer but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseModel {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl DenseModel {
    pub fn new(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return invalid("model needs at least one layer");
        }
        for pair in layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::ShapeMismatch {
                    op: "layer chain",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        Ok(Self { layers, activation })
    }

    /// Two-layer perceptron with seeded Glorot-normal weights and zero biases.
    pub fn init_mlp(d_in: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = stream(seed, &[0xBA5E]);
        let mut layer = |id: &str, d: usize, k: usize| {
            let std = (2.0 / (d + k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let w = Matrix::from_fn(d, k, |_, _| normal.sample(&mut rng) as f32);
            Linear::new(id, w, Matrix::zeros(1, k)).expect("consistent shapes")
        };
        let l1 = layer("fc1", d_in, hidden);
        let l2 = layer("fc2", hidden, classes);
        Self::new(vec![l1, l2], Activation::Tanh).expect("consistent shapes")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.id.clone()).collect()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward input",
                left: x.shape(),
                right: self.layers[0].weight.shape(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row(&layer.bias)?;
            if i < last {
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }

    /// Records the forward pass on `tape` with every weight and bias as a leaf.
    pub fn logits_on_tape(&self, tape: &mut Tape, x: &Matrix) -> Result<(NodeId, Vec<(NodeId, NodeId)>)> {
        let mut params = Vec::with_capacity(self.layers.len());
        let mut h = tape.constant(x.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            params.push((w, b));
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i < last && self.activation == Activation::Tanh {
                h = tape.tanh(h);
            }
        }
        Ok((h, params))
    }
}

/// The frozen pre-trained network. Weights are read-only after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    net: DenseModel,
}

impl BaseModel {
    pub fn freeze(net: DenseModel) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &DenseModel {
        &self.net
    }

    pub fn layer(&self, id: &str) -> Option<&Linear> {
        self.net.layers.iter().find(|l| l.id == id)
    }
}

/// One task's low-rank update `ΔW = A B` bound to a base layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub task_index: u32,
    pub layer_id: String,
    a: Matrix,
    b: Matrix,
}

impl LoraAdapter {
    /// Gaussian `A` with standard deviation `1/sqrt(r)` and zero `B`.
    pub fn new(
        task_index: u32,
        layer_id: impl Into<String>,
        dims: (usize, usize),
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        let (d, k) = dims;
        check_rank(rank, d, k)?;
        let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("positive std");
        let mut rng = stream(seed, &[0xADA9]);
        let a = Matrix::from_fn(d, rank, |_, _| normal.sample(&mut rng) as f32);
        Ok(Self {
            task_index,
            layer_id: layer_id.into(),
            a,
            b: Matrix::zeros(rank, k),
        })
    }

    pub fn from_parts(task_index: u32, layer_id: impl Into<String>, a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::ShapeMismatch {
                op: "adapter factors",
                left: a.shape(),
                right: b.shape(),
            });
        }
        check_rank(a.cols(), a.rows(), b.cols())?;
        Ok(Self {
            task_index,
            layer_id: layer_id.into(),
            a,
            b,
        })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    pub fn set_factors(&mut self, a: Matrix, b: Matrix) -> Result<()> {
        if a.shape() != self.a.shape() || b.shape() != self.b.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_factors",
                left: self.a.shape(),
                right: a.shape(),
            });
        }
        self.a = a;
        self.b = b;
        Ok(())
    }

    /// `A B`, shape `d x k`.
    pub fn delta(&self) -> Matrix {
        self.a.matmul(&self.b).expect("factor shapes validated at construction")
    }
}

fn check_rank(rank: usize, d: usize, k: usize) -> Result<()> {
    if rank == 0 || rank > d.min(k) {
        return Err(Error::RankTooLarge { rank, d, k });
    }
    Ok(())
}

/// Sum of adapter deltas for one layer; the zero matrix when `adapters` is empty.
pub fn cumulative_delta<'a>(
    dims: (usize, usize),
    adapters: impl IntoIterator<Item = &'a LoraAdapter>,
) -> Result<Matrix> {
    let mut total = Matrix::zeros(dims.0, dims.1);
    for a in adapters {
        if a.dims() != dims {
            return Err(Error::ShapeMismatch {
                op: "cumulative_delta",
                left: dims,
                right: a.dims(),
            });
        }
        total.add_assign(&a.delta())?;
    }
    Ok(total)
}

/// How frozen adapters enter the forward pass of later tasks.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum HistoryMode {
    /// `Σ_{i<t} ΔW_i`.
    #[default]
    Sum,
    /// Running merge `M(ΔW_[1:t-2], ΔW_{t-1})`, refreshed after each task.
    Merged(MergePolicy),
}

/// Tape handles produced by [`ContinualModel::forward_on_tape`].
#[derive(Clone, Debug)]
pub struct TapeForward {
    pub logits: NodeId,
    /// Per injected layer: `(A_t, B_t)` leaves.
    pub factors: Vec<(NodeId, NodeId)>,
    /// Per injected layer: the scaled active delta `s A_t B_t`.
    pub active_deltas: Vec<NodeId>,
    /// Per injected layer: frozen history, recorded as a constant.
    pub history: Vec<NodeId>,
}

/// Frozen base, frozen per-task adapters, and the adapters being trained.
#[derive(Clone, Debug)]
pub struct ContinualModel {
    base: BaseModel,
    frozen: Vec<Vec<LoraAdapter>>,
    active: Vec<LoraAdapter>,
    history: Vec<Matrix>,
    mode: HistoryMode,
    scale: f32,
}

impl ContinualModel {
    pub fn new(base: BaseModel, scale: f32, mode: HistoryMode) -> Self {
        let history = base
            .net()
            .layers
            .iter()
            .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
            .collect();
        Self {
            base,
            frozen: Vec::new(),
            active: Vec::new(),
            history,
            mode,
            scale,
        }
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    /// Frozen adapters, one inner list per finished task.
    pub fn frozen(&self) -> &[Vec<LoraAdapter>] {
        &self.frozen
    }

    pub fn active(&self) -> &[LoraAdapter] {
        &self.active
    }

    pub fn history(&self) -> &[Matrix] {
        &self.history
    }

    /// Number of finished tasks.
    pub fn tasks_done(&self) -> usize {
        self.frozen.len()
    }

    /// Starts task `task_index` with fresh adapters on every layer.
    pub fn begin_task(&mut self, task_index: u32, rank: usize, seed: u64) -> Result<()> {
        self.active = self
            .base
            .net()
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                LoraAdapter::new(
                    task_index,
                    l.id.clone(),
                    l.weight.shape(),
                    rank,
                    crate::rng::derive_seed(seed, &[task_index as u64, i as u64]),
                )
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn set_active_factors(&mut self, layer: usize, a: Matrix, b: Matrix) -> Result<()> {
        match self.active.get_mut(layer) {
            Some(ad) => ad.set_factors(a, b),
            None => invalid(format!("no active adapter for layer {layer}")),
        }
    }

    /// Moves the active adapters into the frozen set and refreshes the history.
    pub fn freeze_active(&mut self) -> Result<Vec<LoraAdapter>> {
        if self.active.is_empty() {
            return invalid("no active adapters to freeze");
        }
        let done = std::mem::take(&mut self.active);
        for (hist, ad) in self.history.iter_mut().zip(&done) {
            let d = ad.delta().scale(self.scale);
            *hist = match &self.mode {
                HistoryMode::Sum => hist.add(&d)?,
                HistoryMode::Merged(_) if self.frozen.is_empty() => d,
                HistoryMode::Merged(policy) => crate::merging::merge_fold(&[hist.clone(), d], policy)?,
            };
        }
        self.frozen.push(done.clone());
        Ok(done)
    }

    /// Scaled delta of the active adapter for `layer`, or zero if none.
    pub fn active_delta(&self, layer: usize) -> Matrix {
        match self.active.get(layer) {
            Some(a) => a.delta().scale(self.scale),
            None => {
                let w = &self.base.net().layers[layer].weight;
                Matrix::zeros(w.rows(), w.cols())
            }
        }
    }

    /// Dense weights `W_0 + history + s A_t B_t` per layer.
    pub fn effective(&self) -> Result<DenseModel> {
        let net = self.base.net();
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let w = l.weight.add(&self.history[i])?.add(&self.active_delta(i))?;
                Linear::new(l.id.clone(), w, l.bias.clone())
            })
            .collect::<Result<_>>()?;
        DenseModel::new(layers, net.activation)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.effective()?.logits(x)
    }

    /// Records the forward pass with the active factors as leaves.
    ///
    /// Frozen contributions and base weights enter as constants. Requires
    /// active adapters.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: &Matrix) -> Result<TapeForward> {
        if self.active.len() != self.base.net().layers.len() {
            return invalid("forward_on_tape requires one active adapter per layer");
        }
        let net = self.base.net();
        let last = net.layers.len() - 1;
        let mut h = tape.constant(x.clone());
        let mut out = TapeForward {
            logits: h,
            factors: Vec::new(),
            active_deltas: Vec::new(),
            history: Vec::new(),
        };
        if x.cols() != net.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward input",
                left: x.shape(),
                right: net.layers[0].weight.shape(),
            });
        }
        for (i, layer) in net.layers.iter().enumerate() {
            let w0 = tape.constant(layer.weight.clone());
            let hist = tape.constant(self.history[i].clone());
            let a = tape.leaf(self.active[i].a.clone());
            let b = tape.leaf(self.active[i].b.clone());
            let ab = tape.matmul(a, b)?;
            let delta = if self.scale == 1.0 {
                ab
            } else {
                tape.scale(ab, self.scale)
            };
            let frozen_w = tape.add(w0, hist)?;
            let w = tape.add(frozen_w, delta)?;
            let bias = tape.constant(layer.bias.clone());
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, bias)?;
            if i < last && net.activation == Activation::Tanh {
                h = tape.tanh(h);
            }
            out.factors.push((a, b));
            out.active_deltas.push(delta);
            out.history.push(hist);
        }
        out.logits = h;
        Ok(out)
    }

    /// `W_0 + Σ frozen deltas + active` per layer, whatever the history mode.
    pub fn summed_model(&self) -> Result<DenseModel> {
        let net = self.base.net();
        let layers = net
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let cum = cumulative_delta(l.weight.shape(), self.frozen.iter().map(|t| &t[i]))?.scale(self.scale);
                Linear::new(
                    l.id.clone(),
                    l.weight.add(&cum)?.add(&self.active_delta(i))?,
                    l.bias.clone(),
                )
            })
            .collect::<Result<_>>()?;
        DenseModel::new(layers, net.activation)
    }
}
