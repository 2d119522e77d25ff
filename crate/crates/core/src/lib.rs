//! Continual low-rank adaptation with a parameter stability loss and
//! magnitude-based merging of per-task adapters.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape over `f32`
//! matrices, dense MLP backbones with low-rank adapters, the stability
//! regularizer, a sequential trainer, merge strategies, continual-learning
//! metrics, drift diagnostics and a synthetic rotating-task data generator.

pub mod analysis;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod lora;
pub mod merging;
pub mod metrics;
pub mod nn;
pub mod regularizers;
pub(crate) mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use lora::{BaseModel, ContinualModel, DenseModel, HistoryMode, LoraAdapter};
pub use merging::{merge_fold, merge_pair, MergePolicy, MergeStrategy};
pub use metrics::{AccuracyMatrix, FrMode, MetricSummary};
pub use nn::{Matrix, Tape};
pub use regularizers::{ps_loss, RegularizerConfig};
pub use trainer::{run_sequence, train_task, TrainConfig};
