use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("backward seed must be a 1x1 node, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("tape is empty")]
    EmptyTape,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: usize },

    #[error("numerical abort at iteration {iteration}: {breakdown}")]
    NumericalAbort { iteration: usize, breakdown: String },

    #[error("quadrature failed to converge: {0}")]
    Quadrature(String),

    #[error("unknown dataset id `{0}`")]
    UnknownDataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
