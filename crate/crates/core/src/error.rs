use std::path::PathBuf;

use thiserror::Error;

use crate::estimator::ModelCheckpoint;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse error category, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of supported range: {0}")]
    Range(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unsupported TIFF format: {tag} ({detail})")]
    UnsupportedFormat { tag: String, detail: String },

    #[error("empty phantom region after {attempts} crop attempts")]
    EmptyPhantomRegion { attempts: usize },

    #[error("undefined SNR: background mean is zero")]
    UndefinedSnr,

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence {
        step: u64,
        loss: f64,
        last_good: Option<Box<ModelCheckpoint>>,
    },

    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("TIFF error on {path}: {source}")]
    Tiff {
        path: PathBuf,
        #[source]
        source: tiff::TiffError,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Range(_)
            | Error::Domain(_)
            | Error::Validation(_)
            | Error::Config { .. }
            | Error::UnsupportedFormat { .. }
            | Error::MissingFiles(_)
            | Error::Checkpoint(_) => ErrorKind::Validation,
            _ => ErrorKind::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
