//! Crate-wide error type and result alias.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FgnnError>;

#[derive(Debug, Error)]
pub enum FgnnError {
    /// Incompatible tensor shapes for an operation; carries both shapes.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (item, node, gather row, label) outside its valid range.
    #[error("{what}: index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    /// A segmentation that does not partition its index range, or has an
    /// empty segment.
    #[error("invalid segmentation: {0}")]
    InvalidSegmentation(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad command-line flags, config keys, or parameter ranges.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// An input that produced nothing to work with.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A checkpoint or dataset file that fails validation; names the
    /// section that failed.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A numerical self-check (gradient check) that did not pass.
    #[error("numerical check failed: {0}")]
    NumericalCheck(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl FgnnError {
    /// Process exit code for the CLI: 2 usage/config, 3 data, 4 failed
    /// numerical check, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            FgnnError::Usage(_) => 2,
            FgnnError::Data(_)
            | FgnnError::EmptyInput(_)
            | FgnnError::Integrity(_)
            | FgnnError::Io(_)
            | FgnnError::Json(_) => 3,
            FgnnError::NumericalCheck(_) => 4,
            _ => 1,
        }
    }
}
