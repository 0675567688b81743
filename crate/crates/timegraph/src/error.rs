//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform for the given operation.
    #[error("{op}: dimension mismatch, expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// An input value is outside the operation's domain (log of a
    /// non-positive number, zero-norm cosine operand, ...).
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// An API contract was violated (non-scalar loss, layer count
    /// mismatch, parameter out of range, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration document is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data is malformed or insufficient.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure during training or evaluation.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
