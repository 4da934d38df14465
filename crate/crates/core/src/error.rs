use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("optimizer diverged at iteration {iteration}: {message}")]
    Optimizer { iteration: usize, message: String },

    #[error("training aborted at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("unknown {kind} `{id}`")]
    NotFound { kind: &'static str, id: String },

    /// A user-facing precondition that the caller should surface verbatim.
    #[error("{0}")]
    Precondition(String),

    #[error("operation cancelled")]
    Cancelled,

    #[error("corrupt model snapshot: {0}")]
    Snapshot(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn not_found(kind: &'static str, id: impl Into<String>) -> Self {
        Error::NotFound {
            kind,
            id: id.into(),
        }
    }
}
