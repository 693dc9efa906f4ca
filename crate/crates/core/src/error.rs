use thiserror::Error;

use crate::embstore::EmbError;
use crate::graph::{GraphError, NodeId};
use crate::rwr::SampleError;
use crate::tensor::TensorError;

/// Errors raised while assembling or running the model.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {0} is not a news node")]
    NotANewsNode(NodeId),
    #[error("sequence of length {len} exceeds maximum {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("attribute {key}: table has dim {actual}, model expects {expected}")]
    DimMismatch {
        key: String,
        expected: usize,
        actual: usize,
    },
    #[error("no neighbor sample for news node {0}")]
    MissingSample(NodeId),
    #[error("no label for news node {0}")]
    MissingLabel(NodeId),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

/// Top-level error for pipelines that touch several modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Embedding(#[from] EmbError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("too few labeled news nodes: {found} (need at least {needed})")]
    TooFewSamples { found: usize, needed: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Error::Model(ModelError::Tensor(e))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
