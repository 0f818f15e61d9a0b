use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("placement failed: {0}")]
    Capacity(String),

    #[error("{path}: record {record}: {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("checkpoint mismatch for tensor `{name}`: {message}")]
    Checkpoint { name: String, message: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("gradient check failed for {0}")]
    GradCheck(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::Shape(_) | Error::Capacity(_) | Error::Parse { .. } | Error::Checkpoint { .. } | Error::Io { .. } => 2,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::GradCheck(_) => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, record: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            record,
            message: message.into(),
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
