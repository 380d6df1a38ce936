//! Desk-scale learning tasks: datasets, non-IID partitioning, convex models
//! and local SGD.

mod dataset;
mod sgd;
mod task;

pub use dataset::{shard_partition, LabeledDataset, SyntheticData, SyntheticSpec};
pub use sgd::{sgd_local_update, BatchSampler};
pub use task::{ModelVector, TaskKind, TaskSpec};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearningError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dataset of {size} samples cannot be split into {shards} shards")]
    DatasetTooSmall { size: usize, shards: usize },
    #[error("accuracy is undefined for least-squares tasks")]
    UnsupportedMetric,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("dataset csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}
