//! Parameter stability loss and the optional orthogonality penalty.
//!
//! For a new-task delta entry `w` and accumulated history entry `p`, the
//! stability penalty is `w² · (1 − tanh(αw)·tanh(αp))`. Aligned signs drive
//! the bracket toward 0, opposite signs toward 2, so large sign-flipping
//! updates cost the most.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{Matrix, NodeId, Tape};

/// How the per-entry stability terms collapse into one scalar per layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsReduction {
    /// `mean_ij[w² (1 − tanh(αw) tanh(αp))]`.
    #[default]
    Elementwise,
    /// `mean_ij[w²] · mean_ij[1 − tanh(αw) tanh(αp)]`.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// Weight of the stability loss. Mean reduction keeps it small, so the
    /// weight is large.
    pub lambda: f64,
    /// Temperature of the sign factors; large values make them nearly sign functions.
    pub alpha: f64,
    /// First (1-based) task on which the stability loss is active.
    pub apply_from_task: usize,
    pub orth_mu: f64,
    pub reduction: PsReduction,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self {
            lambda: 3000.0,
            alpha: 1000.0,
            apply_from_task: 2,
            orth_mu: 0.0,
            reduction: PsReduction::Elementwise,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return invalid(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.orth_mu >= 0.0 && self.orth_mu.is_finite()) {
            return invalid(format!("orth_mu must be non-negative, got {}", self.orth_mu));
        }
        if self.apply_from_task == 0 {
            return invalid("apply_from_task is 1-based");
        }
        Ok(())
    }

    /// Whether the stability term contributes on (1-based) `task_index`.
    pub fn stability_active(&self, task_index: usize) -> bool {
        self.lambda > 0.0 && task_index >= self.apply_from_task
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Element-wise stability loss, mean-reduced.
pub fn ps_loss(delta_t: &Matrix, cum_prev: &Matrix, alpha: f64) -> Result<f64> {
    ps_loss_with(delta_t, cum_prev, alpha, PsReduction::Elementwise)
}

pub fn ps_loss_with(delta_t: &Matrix, cum_prev: &Matrix, alpha: f64, reduction: PsReduction) -> Result<f64> {
    same_shape("ps_loss", delta_t, cum_prev)?;
    let n = delta_t.len() as f64;
    let (mut prod, mut sq, mut bracket) = (0.0f64, 0.0f64, 0.0f64);
    for (&w, &p) in delta_t.data().iter().zip(cum_prev.data()) {
        let (w, p) = (w as f64, p as f64);
        let b = 1.0 - (alpha * w).tanh() * (alpha * p).tanh();
        prod += w * w * b;
        sq += w * w;
        bracket += b;
    }
    Ok(match reduction {
        PsReduction::Elementwise => prod / n,
        PsReduction::Global => (sq / n) * (bracket / n),
    })
}

/// Records the stability loss for the delta node `delta_t`; `cum_prev` is a constant.
pub fn ps_loss_on_tape(
    tape: &mut Tape,
    delta_t: NodeId,
    cum_prev: &Matrix,
    alpha: f64,
    reduction: PsReduction,
) -> Result<NodeId> {
    same_shape("ps_loss", tape.value(delta_t), cum_prev)?;
    let alpha = alpha as f32;
    let prev_sign = tape.constant(cum_prev.scale(alpha).tanh_map());
    let scaled = tape.scale(delta_t, alpha);
    let soft_sign = tape.tanh(scaled);
    let agreement = tape.hadamard(soft_sign, prev_sign)?;
    let neg = tape.scale(agreement, -1.0);
    let bracket = tape.add_scalar(neg, 1.0);
    let sq = tape.hadamard(delta_t, delta_t)?;
    Ok(match reduction {
        PsReduction::Elementwise => {
            let prod = tape.hadamard(sq, bracket)?;
            tape.mean(prod)
        }
        PsReduction::Global => {
            let m_sq = tape.mean(sq);
            let m_br = tape.mean(bracket);
            tape.hadamard(m_sq, m_br)?
        }
    })
}

/// `L_f + λ Σ L_s` once the stability term is active, plus `μ · orth`.
pub fn total_loss(l_f: f64, ps_terms: &[f64], cfg: &RegularizerConfig, task_index: usize, orth: f64) -> f64 {
    let mut total = l_f;
    if cfg.stability_active(task_index) {
        total += cfg.lambda * ps_terms.iter().sum::<f64>();
    }
    if cfg.orth_mu > 0.0 {
        total += cfg.orth_mu * orth;
    }
    total
}

/// `Σ_i ‖prev_A_iᵀ active_A‖²_F`.
pub fn orth_loss(active_a: &Matrix, prev_as: &[Matrix]) -> Result<f64> {
    let mut total = 0.0;
    for prev in prev_as {
        if prev.rows() != active_a.rows() {
            return Err(Error::ShapeMismatch {
                op: "orth_loss",
                left: prev.shape(),
                right: active_a.shape(),
            });
        }
        total += prev.transpose().matmul(active_a)?.frob_norm_sq();
    }
    Ok(total)
}

/// Tape version of [`orth_loss`]; returns `None` when `prev_as` is empty.
pub fn orth_loss_on_tape(tape: &mut Tape, active_a: NodeId, prev_as: &[Matrix]) -> Result<Option<NodeId>> {
    let mut total: Option<NodeId> = None;
    for prev in prev_as {
        if prev.rows() != tape.value(active_a).rows() {
            return Err(Error::ShapeMismatch {
                op: "orth_loss",
                left: prev.shape(),
                right: tape.value(active_a).shape(),
            });
        }
        let pt = tape.constant(prev.transpose());
        let gram = tape.matmul(pt, active_a)?;
        let term = tape.frob_norm_sq(gram);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}
