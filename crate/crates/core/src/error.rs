use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the quality-control pipeline.
#[derive(Debug, Error)]
pub enum QcError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("invalid label value {value} (allowed: 0..=3)")]
    InvalidLabel { value: f64 },
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("total mass is zero")]
    EmptyMass,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("surface distance undefined: a surface is empty")]
    UndefinedDistance,
    #[error("registration diverged: {0}")]
    DivergedRegistration(String),
    #[error("reference set is empty")]
    NoReferences,
    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T, E = QcError> = std::result::Result<T, E>;

impl QcError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QcError::Io {
            path: path.into(),
            source,
        }
    }
}
