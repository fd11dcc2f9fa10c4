use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix had the wrong length for the operation.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The operation was called in a state or mode it does not support.
    #[error("{0}")]
    InvalidCall(String),

    /// Bad experiment configuration (unknown key, unparsable value, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed on-disk artifact (checkpoint, run log, resume file).
    #[error("malformed data: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
