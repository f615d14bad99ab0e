//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape for a binary operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single-operand shape/domain violation.
    #[error("invalid shape in {op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    /// Non-finite values produced or consumed by a numeric operation.
    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    /// A malformed computation record (unknown node, non-scalar loss, ...).
    #[error("invalid computation record: {0}")]
    Record(String),

    /// Bad user-facing configuration or argument.
    #[error("invalid config: {0}")]
    Config(String),

    /// A stage/command precondition is not met (missing checkpoint, bad data dir, ...).
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
