//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

use crate::protocol::DecodeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or layer shapes.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// NaN or infinity encountered where finite values are required.
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Internal bookkeeping (such as pooling indices) is inconsistent.
    #[error("corrupt state in {op}: {detail}")]
    Corrupt { op: &'static str, detail: String },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("model build error at layer {layer}: {detail}")]
    Build { layer: usize, detail: String },

    #[error(transparent)]
    Decode(#[from] DecodeError),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("config error in `{field}`: {detail}")]
    Config { field: String, detail: String },

    #[error("{}: {detail}", path.display())]
    Data { path: PathBuf, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 config, 2 transport, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Transport(_) | Error::Protocol(_) | Error::Decode(_) => 2,
            Error::Numeric { .. } => 3,
            _ => 1,
        }
    }
}
