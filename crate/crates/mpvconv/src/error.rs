//! Crate-wide error type and exit-code mapping.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown config key `{key}` at {path}:{line}")]
    UnknownKey {
        path: PathBuf,
        line: usize,
        key: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("loss is NaN at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("gradient check failed for {op}: max relative error {max_rel_err:.3e}")]
    GradCheckFailed { op: String, max_rel_err: f64 },
}

impl Error {
    /// Process exit code: 1 for validation/configuration/i-o problems,
    /// 2 for numerical failures (NaN loss, failed gradient checks).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::NanLoss { .. } | Error::GradCheckFailed { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
