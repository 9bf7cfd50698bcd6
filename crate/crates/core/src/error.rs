//! Error type shared by every module in the crate.

use thiserror::Error;

/// Errors produced by watermarking, key-generation, and model operations.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates a precondition (bad dimensions, out-of-range
    /// indices, inconsistent list lengths).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A vector with zero variance reached a normalization step.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A linear system or inversion target is singular to machine precision.
    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    /// Permutation recovery produced a non-bijective column assignment.
    #[error("ambiguous recovery: {0}")]
    AmbiguousRecovery(String),

    /// No permutation draw satisfied the condition-number threshold.
    #[error("conditioning failure: {0}")]
    ConditioningFailure(String),

    /// Random generation kept producing unusable draws.
    #[error("generation failure: {0}")]
    GenerationFailure(String),

    /// A model or keystore file is malformed.
    #[error("format error: {0}")]
    FormatError(String),

    /// Underlying I/O failed.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
