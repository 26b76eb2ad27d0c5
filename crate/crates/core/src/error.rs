//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement; the message names the offending shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid operation parameter (e.g. dropout rate >= 1).
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Index out of range (e.g. target id >= vocabulary size).
    #[error("index out of range: {0}")]
    Index(String),

    /// Violated API contract (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed or inconsistent input data.
    #[error("input error: {0}")]
    Input(String),

    /// Token outside the checkpoint's vocabulary.
    #[error("encoding error: {0}")]
    Encoding(String),

    /// Training diverged or failed; reports the global step.
    #[error("training failed at step {step}: {reason}")]
    Training { step: u64, reason: String },

    /// Checkpoint/config fingerprint disagreement.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Unreadable or unrecognized serialized artifact.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
