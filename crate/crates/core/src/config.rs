//! Flat experiment configuration and report formatting helpers.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SequenceSpec;
use crate::error::{Error, Result};
use crate::merging::{MergePolicy, MergeStrategy};
use crate::regularizers::{PsReduction, RegularizerConfig};
use crate::trainer::{OptimizerKind, PretrainConfig, TrainConfig};

/// When per-task deltas are consolidated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeCadence {
    /// One merge after the whole sequence; history is the plain sum while training.
    #[default]
    Final,
    /// History is replaced by the running merge after every task.
    PerTask,
}

impl fmt::Display for MergeCadence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeCadence::Final => "final",
            MergeCadence::PerTask => "per-task",
        })
    }
}

impl FromStr for MergeCadence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(MergeCadence::Final),
            "per-task" | "per_task" => Ok(MergeCadence::PerTask),
            other => Err(Error::Config(format!("unknown merge cadence {other:?}"))),
        }
    }
}

/// Every tunable of a run as one flat JSON object. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds data generation, pretraining and adapter training.
    pub seed: u64,

    pub d_in: usize,
    pub n_classes: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// One rotation per task; the task count follows from its length.
    pub angles_deg: Vec<f64>,
    /// 1-based task order; empty means generation order.
    pub order: Vec<usize>,
    pub plane_radius: f64,
    pub off_plane_std: f64,

    pub hidden: usize,
    pub pretrain_epochs: usize,
    pub pretrain_learning_rate: f64,

    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rank: usize,
    pub lora_scale: f32,

    pub lambda: f64,
    pub alpha: f64,
    pub apply_from_task: usize,
    pub orth_mu: f64,
    pub ps_reduction: PsReduction,

    /// `None` trains plain incremental adapters with no merge.
    pub merge_strategy: Option<MergeStrategy>,
    pub merge_cadence: MergeCadence,
    pub ties_trim_fraction: f64,

    /// Bottom-k percentages for the sign split.
    pub sign_k_percent: Vec<f64>,
    pub hist_top_fraction: f64,
    pub hist_pool_window: usize,
    pub hist_bins: usize,

    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seq = SequenceSpec::drop_fixture(0);
        let train = TrainConfig::default();
        let reg = RegularizerConfig::default();
        let pre = PretrainConfig::default();
        let merge = MergePolicy::default();
        Self {
            seed: 0,
            d_in: seq.d_in,
            n_classes: seq.n_classes,
            train_per_task: seq.train_per_task,
            test_per_task: seq.test_per_task,
            angles_deg: seq.angles_deg,
            order: Vec::new(),
            plane_radius: seq.plane_radius,
            off_plane_std: seq.off_plane_std,
            hidden: pre.hidden,
            pretrain_epochs: pre.epochs,
            pretrain_learning_rate: pre.learning_rate,
            epochs_per_task: train.epochs_per_task,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            optimizer: train.optimizer,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.eps,
            rank: train.rank,
            lora_scale: train.lora_scale,
            lambda: reg.lambda,
            alpha: reg.alpha,
            apply_from_task: reg.apply_from_task,
            orth_mu: reg.orth_mu,
            ps_reduction: reg.reduction,
            merge_strategy: Some(merge.strategy),
            merge_cadence: MergeCadence::Final,
            ties_trim_fraction: merge.ties_trim_fraction,
            sign_k_percent: vec![20.0, 40.0, 60.0, 80.0, 100.0],
            hist_top_fraction: 0.2,
            hist_pool_window: 4,
            hist_bins: crate::analysis::DEFAULT_BINS,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn sequence(&self) -> SequenceSpec {
        let n = self.angles_deg.len();
        SequenceSpec {
            n_tasks: n,
            d_in: self.d_in,
            n_classes: self.n_classes,
            train_per_task: self.train_per_task,
            test_per_task: self.test_per_task,
            angles_deg: self.angles_deg.clone(),
            order: if self.order.is_empty() {
                (1..=n).collect()
            } else {
                self.order.clone()
            },
            master_seed: self.seed,
            plane_radius: self.plane_radius,
            off_plane_std: self.off_plane_std,
        }
    }

    pub fn regularizer(&self) -> RegularizerConfig {
        RegularizerConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            apply_from_task: self.apply_from_task,
            orth_mu: self.orth_mu,
            reduction: self.ps_reduction,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs_per_task: self.epochs_per_task,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            seed: self.seed,
            rank: self.rank,
            lora_scale: self.lora_scale,
            reg: self.regularizer(),
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            hidden: self.hidden,
            epochs: self.pretrain_epochs,
            batch_size: self.batch_size,
            learning_rate: self.pretrain_learning_rate,
            seed: self.seed,
        }
    }

    pub fn merge_policy(&self) -> Option<MergePolicy> {
        self.merge_strategy.map(|strategy| MergePolicy {
            strategy,
            ties_trim_fraction: self.ties_trim_fraction,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.sequence().validate())?;
        wrap(self.train().validate())?;
        if let Some(p) = self.merge_policy() {
            wrap(p.validate())?;
        }
        if self.hidden == 0 || self.hist_pool_window == 0 || self.hist_bins == 0 {
            return Err(Error::Config(
                "hidden, hist_pool_window and hist_bins must be positive".into(),
            ));
        }
        if self.sign_k_percent.iter().any(|k| !(*k > 0.0 && *k <= 100.0)) {
            return Err(Error::Config("sign_k_percent entries must be in (0, 100]".into()));
        }
        Ok(())
    }
}

/// Parses `"3,1,2"` into a 1-based order.
pub fn parse_order(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad order entry {p:?} in {s:?}")))
        })
        .collect()
}

/// `x` rounded to `digits` significant digits.
pub fn round_sig(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let shift = digits as i32 - 1 - mag;
    let f = 10f64.powi(shift.abs());
    let r = if shift >= 0 {
        (x * f).round() / f
    } else {
        (x / f).round() * f
    };
    // Reparse so the printed form is the shortest decimal with that many digits.
    format!("{:.*e}", digits.saturating_sub(1) as usize, r)
        .parse()
        .unwrap_or(r)
}

/// Six-significant-digit rounding used by every report.
pub fn r6(x: f64) -> f64 {
    round_sig(x, 6)
}

/// Rounds every float in a JSON value to six significant digits.
pub fn round_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(m) = serde_json::Number::from_f64(r6(x)) {
                    *n = m;
                }
            }
        }
        serde_json::Value::Array(xs) => xs.iter_mut().for_each(round_json),
        serde_json::Value::Object(m) => m.values_mut().for_each(round_json),
        _ => {}
    }
}
