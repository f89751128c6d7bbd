use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("embedding file: {0}")]
    Embedding(String),

    #[error("non-finite embedding value in row {row}")]
    NonFinite { row: usize },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("no ids shared between manifest and embeddings")]
    EmptyIntersection,

    #[error("zero vector (row {0})")]
    ZeroVector(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("misaligned ids: {0}")]
    Misaligned(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("budget {budget} exceeds available samples {available}")]
    Budget { budget: usize, available: usize },

    #[error("insufficient labels: {0}")]
    InsufficientLabels(String),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("loss became NaN at epoch {0}")]
    NanLoss(usize),

    #[error("class `{0}` has no labeled samples")]
    MissingClass(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
