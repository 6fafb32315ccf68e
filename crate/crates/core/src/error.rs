//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor ops, file I/O, model fitting and metrics.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimensionality mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Malformed NPY (or other binary) input; `offset` is the byte position
    /// at which the problem was detected.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Input violates a documented precondition (e.g. unnormalized labels).
    #[error("validation error: {0}")]
    Validation(String),

    /// Non-finite values or a numerically singular system.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Binary targets collapse to a single class.
    #[error("degenerate targets: {0}")]
    DegenerateTargets(String),

    /// A metric is undefined on the given input (e.g. AuROC with one class).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A brute-force check would exceed its enumeration budget.
    #[error("size guard exceeded: {0}")]
    SizeGuard(String),

    /// A required intermediate tensor is missing or inconsistent.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
