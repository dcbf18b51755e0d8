use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid hyperparameter or scenario setting.
    #[error("config error: {0}")]
    Config(String),

    /// API misuse (wrong mode, unknown task, empty input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN or infinity produced or consumed.
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    /// Malformed input data; `line` is 1-based when known.
    #[error("ingest error{}: {message}", line.map(|l| format!(" at {}:{l}", file.display())).unwrap_or_default())]
    Ingest {
        file: PathBuf,
        line: Option<usize>,
        message: String,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 2 for usage/schema problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
