//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends a node holding its output and operand ids, so
//! operands always precede their consumers. [`Tape::grad`] walks the nodes
//! backwards and applies each adjoint rule. Constants never receive or
//! propagate adjoints.

use crate::error::{Error, Result};
use crate::nn::matrix::{check_labels, softmax_rows, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId, f32),
    AddRow(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    FrobNormSq(NodeId),
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    tracked: bool,
}

/// Records a computation for one backward pass. Rebuilt per minibatch.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints for every node reachable from the differentiated output.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `id`; zero when `id` does not influence the output.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tracked)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Input treated as fixed; its gradient is always zero.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let op = Op::MatMul(a, b);
        self.record(op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Hadamard(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> NodeId {
        self.record(Op::Scale(a, s), &[a]).expect("scale is shape-preserving")
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f32) -> NodeId {
        self.record(Op::AddScalar(a, s), &[a])
            .expect("add_scalar is shape-preserving")
    }

    /// Adds a `1 x cols` bias row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddRow(a, bias), &[a, bias])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.record(Op::Transpose(a), &[a]).expect("transpose cannot fail")
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.record(Op::Tanh(a), &[a]).expect("tanh cannot fail")
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.record(Op::Sum(a), &[a]).expect("sum cannot fail")
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.record(Op::Mean(a), &[a]).expect("mean cannot fail")
    }

    pub fn frob_norm_sq(&mut self, a: NodeId) -> NodeId {
        self.record(Op::FrobNormSq(a), &[a]).expect("frob_norm_sq cannot fail")
    }

    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        check_labels(self.value(logits), labels)?;
        let probs = softmax_rows(self.value(logits));
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.record(op, &[logits])
    }

    fn record(&mut self, op: Op, operands: &[NodeId]) -> Result<NodeId> {
        let value = self.eval(&op)?;
        let tracked = self.tracked(operands);
        Ok(self.push(op, value, tracked))
    }

    fn eval(&self, op: &Op) -> Result<Matrix> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        Ok(match op {
            Op::Leaf | Op::Constant => unreachable!("inputs are not evaluated"),
            Op::MatMul(a, b) => v(a).matmul(v(b))?,
            Op::Add(a, b) => v(a).add(v(b))?,
            Op::Sub(a, b) => v(a).sub(v(b))?,
            Op::Hadamard(a, b) => v(a).hadamard(v(b))?,
            Op::Scale(a, s) => v(a).scale(*s),
            Op::AddScalar(a, s) => v(a).map(|x| x + s),
            Op::AddRow(a, b) => v(a).add_row(v(b))?,
            Op::Transpose(a) => v(a).transpose(),
            Op::Tanh(a) => v(a).tanh_map(),
            Op::Sum(a) => Matrix::scalar(v(a).sum() as f32),
            Op::Mean(a) => Matrix::scalar(v(a).mean() as f32),
            Op::FrobNormSq(a) => Matrix::scalar(v(a).frob_norm_sq() as f32),
            Op::SoftmaxXent { logits, labels, .. } => {
                Matrix::scalar(crate::nn::matrix::softmax_xent(v(logits), labels)? as f32)
            }
        })
    }

    /// Recomputes every node from the recorded inputs.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut scratch = Tape::new();
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                ref op => scratch.eval(op)?,
            };
            scratch.nodes.push(Node {
                op: node.op.clone(),
                value: value.clone(),
                tracked: node.tracked,
            });
            out.push(value);
        }
        Ok(out)
    }

    /// Reverse-mode gradient of the scalar node `output`.
    pub fn grad(&self, output: NodeId) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if out_shape != (1, 1) {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.backprop(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        // Only tracked nodes carry meaningful adjoints.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.tracked {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node, up: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].tracked;
        let mut acc = |id: NodeId, g: Matrix| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, up.matmul(&val(*b).transpose())?)?;
                }
                if wants(*b) {
                    acc(*b, val(*a).transpose().matmul(up)?)?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, up.clone())?;
                }
                if wants(*b) {
                    acc(*b, up.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, up.clone())?;
                }
                if wants(*b) {
                    acc(*b, up.scale(-1.0))?;
                }
            }
            Op::Hadamard(a, b) => {
                if wants(*a) {
                    acc(*a, up.hadamard(val(*b))?)?;
                }
                if wants(*b) {
                    acc(*b, up.hadamard(val(*a))?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, up.scale(*s))?,
            Op::AddScalar(a, _) => acc(*a, up.clone())?,
            Op::AddRow(a, b) => {
                if wants(*a) {
                    acc(*a, up.clone())?;
                }
                if wants(*b) {
                    let cols = up.cols();
                    let mut sums = vec![0.0f64; cols];
                    for r in 0..up.rows() {
                        for (s, &g) in sums.iter_mut().zip(up.row(r)) {
                            *s += g as f64;
                        }
                    }
                    acc(*b, Matrix::new(1, cols, sums.into_iter().map(|s| s as f32).collect())?)?;
                }
            }
            Op::Transpose(a) => acc(*a, up.transpose())?,
            Op::Tanh(a) => {
                let y = &node.value;
                let g = up.zip_with(y, "tanh adjoint", |u, t| u * (1.0 - t * t))?;
                acc(*a, g)?;
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, up.item()?))?;
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let g = (up.item()? as f64 / (r * c) as f64) as f32;
                acc(*a, Matrix::filled(r, c, g))?;
            }
            Op::FrobNormSq(a) => acc(*a, val(*a).scale(2.0 * up.item()?))?,
            Op::SoftmaxXent { logits, labels, probs } => {
                let (rows, cols) = val(*logits).shape();
                let scale = up.item()? as f64 / rows as f64;
                let mut g = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                        g.push(((probs[r * cols + c] - onehot) * scale) as f32);
                    }
                }
                acc(*logits, Matrix::new(rows, cols, g)?)?;
            }
        }
        Ok(())
    }
}
