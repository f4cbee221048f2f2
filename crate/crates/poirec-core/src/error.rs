//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by data loading, model construction, and training.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Two tensors had incompatible shapes for an operation.
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A data file could not be parsed; `line` is 1-based and counts the header.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    /// Input failed a structural validation check.
    #[error("validation error: {0}")]
    Validation(String),

    /// A value fell outside its documented range.
    #[error("range error: {0}")]
    Range(String),

    /// An API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// A numeric operation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The training loss became non-finite.
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Training { epoch: usize, batch: usize },

    /// An entity id was not present in the trained model or dataset.
    #[error("unknown {kind} id {id}")]
    Lookup { kind: &'static str, id: u64 },

    /// A configuration file or key was invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
