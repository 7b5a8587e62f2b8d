//! Crate-wide error type.
//!
//! Variants map onto the process exit codes used by the `prefcond` binary:
//! validation errors exit 2, missing pipeline dependencies exit 3, and
//! numerical failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A contract precondition or data invariant was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor/vector dimensions do not agree.
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: String,
    },

    /// A pipeline step was asked to resume without its upstream artifacts.
    #[error("missing dependency: {0}")]
    MissingDependency(String),

    /// Non-finite loss, failed eigendecomposition, or similar numeric abort.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn dimension(expected: usize, got: usize, context: impl Into<String>) -> Self {
        Error::Dimension {
            expected,
            got,
            context: context.into(),
        }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Exit code for the CLI: 2 validation, 3 missing dependency, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Dimension { .. } => 2,
            Error::MissingDependency(_) => 3,
            Error::Numerical(_) => 4,
            Error::Io(_) | Error::Serde(_) => 1,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
