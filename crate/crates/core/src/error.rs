//! Error taxonomy shared across the workspace.

use thiserror::Error;

/// Unified error type for all planner subsystems.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad hyperparameters, unknown task, missing files).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation (out-of-range index, empty input).
    #[error("argument error: {0}")]
    Argument(String),

    /// Tensor/vector dimension mismatch.
    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// Malformed persisted record.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Label outside a closed vocabulary (critic options, strategy ids).
    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Protocol violation (wrong critic sample count, malformed chat response).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Transport failure talking to an LLM endpoint; retryable.
    #[error("transport error: {0}")]
    Transport(String),

    /// Generated content failed invariant checks.
    #[error("validation error: {0}")]
    Validation(String),

    /// Numerical domain violation (underflowed schedule, NaN loss).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Inconsistent data fed to an aggregation (missing persona tag, empty set).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Whether a retry against the same endpoint may succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
