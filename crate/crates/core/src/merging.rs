//! Post-training consolidation of per-task deltas.
//!
//! The magnitude strategy keeps, entry by entry, the value with the larger
//! absolute value and folds left over the task order, so
//! `merged_t = M(merged_{t-1}, ΔW_t)`. On equal magnitudes the accumulated
//! operand wins.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lora::{BaseModel, DenseModel, Linear, LoraAdapter};
use crate::nn::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    #[default]
    MagnitudeMax,
    Average,
    Ties,
}

impl MergeStrategy {
    pub const ALL: [MergeStrategy; 3] = [MergeStrategy::MagnitudeMax, MergeStrategy::Average, MergeStrategy::Ties];

    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::MagnitudeMax => "magnitude_max",
            MergeStrategy::Average => "average",
            MergeStrategy::Ties => "ties",
        }
    }
}

impl fmt::Display for MergeStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude_max" => Ok(MergeStrategy::MagnitudeMax),
            "average" => Ok(MergeStrategy::Average),
            "ties" => Ok(MergeStrategy::Ties),
            other => invalid(format!("unknown merge strategy {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergePolicy {
    pub strategy: MergeStrategy,
    /// Fraction of largest-magnitude entries each input keeps before sign election.
    pub ties_trim_fraction: f64,
}

impl Default for MergePolicy {
    fn default() -> Self {
        Self {
            strategy: MergeStrategy::MagnitudeMax,
            ties_trim_fraction: 0.8,
        }
    }
}

impl MergePolicy {
    pub fn new(strategy: MergeStrategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategy == MergeStrategy::Ties && !(self.ties_trim_fraction > 0.0 && self.ties_trim_fraction <= 1.0) {
            return invalid(format!(
                "ties_trim_fraction must be in (0, 1], got {}",
                self.ties_trim_fraction
            ));
        }
        Ok(())
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Per entry, the operand with the larger magnitude; `x` wins ties.
pub fn merge_pair(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    check_same("merge_pair", x, y)?;
    x.zip_with(y, "merge_pair", |a, b| if b.abs() > a.abs() { b } else { a })
}

/// Consolidates `deltas` (in task order) under `policy`.
pub fn merge_fold(deltas: &[Matrix], policy: &MergePolicy) -> Result<Matrix> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::Invalid("merge_fold needs at least one delta".into()))?;
    for d in &deltas[1..] {
        check_same("merge_fold", first, d)?;
    }
    policy.validate()?;
    match policy.strategy {
        MergeStrategy::MagnitudeMax => {
            let mut acc = first.clone();
            for d in &deltas[1..] {
                acc = merge_pair(&acc, d)?;
            }
            Ok(acc)
        }
        MergeStrategy::Average => {
            let n = deltas.len() as f64;
            let mut sums = vec![0.0f64; first.len()];
            for d in deltas {
                for (s, &v) in sums.iter_mut().zip(d.data()) {
                    *s += v as f64;
                }
            }
            Matrix::new(
                first.rows(),
                first.cols(),
                sums.into_iter().map(|s| (s / n) as f32).collect(),
            )
        }
        MergeStrategy::Ties => ties_merge(deltas, policy.ties_trim_fraction),
    }
}

/// Keeps the `fraction` of entries with largest magnitude, zeroing the rest.
/// Equal magnitudes at the cut are resolved by position.
pub fn trim_top(m: &Matrix, fraction: f64) -> Matrix {
    let n = m.len();
    let keep = ((fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let data = m.data();
    order.sort_by(|&i, &j| {
        data[j]
            .abs()
            .partial_cmp(&data[i].abs())
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut out = vec![0.0f32; n];
    for &i in &order[..keep] {
        out[i] = data[i];
    }
    Matrix::new(m.rows(), m.cols(), out).expect("same shape")
}

fn ties_merge(deltas: &[Matrix], fraction: f64) -> Result<Matrix> {
    let trimmed: Vec<Matrix> = deltas.iter().map(|d| trim_top(d, fraction)).collect();
    let (rows, cols) = deltas[0].shape();
    let mut out = vec![0.0f32; rows * cols];
    for (e, slot) in out.iter_mut().enumerate() {
        let (mut pos, mut neg) = (0.0f64, 0.0f64);
        let mut first_sign = 0.0f32;
        for t in &trimmed {
            let v = t.data()[e];
            if v > 0.0 {
                pos += v as f64;
            } else if v < 0.0 {
                neg -= v as f64;
            }
            if first_sign == 0.0 && v != 0.0 {
                first_sign = v.signum();
            }
        }
        let elected = match pos.partial_cmp(&neg) {
            Some(Ordering::Greater) => 1.0,
            Some(Ordering::Less) => -1.0,
            _ => first_sign,
        };
        if elected == 0.0 {
            continue;
        }
        let (mut sum, mut count) = (0.0f64, 0usize);
        for t in &trimmed {
            let v = t.data()[e];
            if v != 0.0 && v.signum() == elected {
                sum += v as f64;
                count += 1;
            }
        }
        if count > 0 {
            *slot = (sum / count as f64) as f32;
        }
    }
    Matrix::new(rows, cols, out)
}

/// Magnitude fold that also reports, per entry, which input (0-based) it came from.
pub fn merge_fold_with_sources(deltas: &[Matrix]) -> Result<(Matrix, Vec<usize>)> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::Invalid("merge_fold needs at least one delta".into()))?;
    let mut values = first.data().to_vec();
    let mut sources = vec![0usize; values.len()];
    for (t, d) in deltas.iter().enumerate().skip(1) {
        check_same("merge_fold", first, d)?;
        for ((v, s), &cand) in values.iter_mut().zip(sources.iter_mut()).zip(d.data()) {
            if cand.abs() > v.abs() {
                *v = cand;
                *s = t;
            }
        }
    }
    Ok((Matrix::new(first.rows(), first.cols(), values)?, sources))
}

/// Groups adapters by layer id, preserving their order within each layer.
pub fn deltas_by_layer(base: &BaseModel, adapters: &[LoraAdapter], scale: f32) -> Result<Vec<Vec<Matrix>>> {
    base.net()
        .layers
        .iter()
        .map(|l| {
            let ds: Vec<Matrix> = adapters
                .iter()
                .filter(|a| a.layer_id == l.id)
                .map(|a| {
                    if a.dims() != l.weight.shape() {
                        Err(Error::ShapeMismatch {
                            op: "adapter vs layer",
                            left: l.weight.shape(),
                            right: a.dims(),
                        })
                    } else {
                        Ok(a.delta().scale(scale))
                    }
                })
                .collect::<Result<_>>()?;
            if ds.is_empty() {
                return invalid(format!("no adapters for layer {:?}", l.id));
            }
            Ok(ds)
        })
        .collect()
}

/// `W_0 + merge_fold(deltas)` for every base layer.
pub fn merged_weights(
    base: &BaseModel,
    adapters: &[LoraAdapter],
    policy: &MergePolicy,
    scale: f32,
) -> Result<DenseModel> {
    let grouped = deltas_by_layer(base, adapters, scale)?;
    let net = base.net();
    let layers = net
        .layers
        .iter()
        .zip(&grouped)
        .map(|(l, ds)| Linear::new(l.id.clone(), l.weight.add(&merge_fold(ds, policy)?)?, l.bias.clone()))
        .collect::<Result<_>>()?;
    DenseModel::new(layers, net.activation)
}
