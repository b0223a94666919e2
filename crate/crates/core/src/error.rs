use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("constraint matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("node {0} was never recorded on this tape")]
    UnrecordedLeaf(usize),

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("non-finite loss at unroll step {step}")]
    NonFiniteLoss { step: usize },

    #[error("empty trajectory batch")]
    EmptyBatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
