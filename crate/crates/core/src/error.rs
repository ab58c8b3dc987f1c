use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("operator is identically zero")]
    ZeroOperator,

    #[error("numerical divergence at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("tape exceeded its unroll budget of {budget} bytes")]
    UnrollBudget { budget: usize },

    #[error("loss must be a scalar, got a {rows}x{cols} node")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("backward already ran on this recording")]
    BackwardTwice,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("malformed dataset at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
