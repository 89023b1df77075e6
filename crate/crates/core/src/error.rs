use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("unsupported broadcast in {op}: {lhs:?} with {rhs:?} (only leading-dimension broadcast)")]
    Broadcast { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("cross-entropy has no non-ignored targets")]
    EmptyTargets,

    #[error("target {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },

    #[error("backward called on a consumed graph")]
    GraphConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown layer id {0}")]
    UnknownLayer(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("lora adapters already injected")]
    DuplicateInjection,

    #[error("probe needs {needed} batches, got {got}")]
    NotEnoughBatches { needed: usize, got: usize },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("run diverged: {0}")]
    Diverged(String),

    #[error("task mismatch: {0} vs {1}")]
    TaskMismatch(String, String),

    #[error("decode length {needed} exceeds max_seq {max_seq}")]
    DecodeTooLong { needed: usize, max_seq: usize },

    #[error("invalid benchmark task: {0}")]
    InvalidTask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate ledger key {0}")]
    DuplicateKey(String),

    #[error("{path}: line {line}: {message}")]
    Ledger { path: PathBuf, line: u64, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("interrupted after stage {0}")]
    Interrupted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
