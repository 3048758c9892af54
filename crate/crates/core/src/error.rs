use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the network, geometry, or harness code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("degenerate batch: batch norm in train mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("empty loss: every label is ignored")]
    EmptyLoss,

    #[error("optimizer: {0}")]
    Optimizer(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("stage {stage} grid has {voxels} voxel(s); the cloud is too small for this many stages")]
    Scale { stage: usize, voxels: usize },

    #[error("finite-difference oracle: {0}")]
    Oracle(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
