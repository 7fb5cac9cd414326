use std::path::PathBuf;

use thiserror::Error;

use crate::ensemble::EnsembleError;
use crate::ingest::IngestError;
use crate::matrices::MatrixError;
use crate::phases::PhaseError;
use crate::regression::RegressionError;
use crate::spectral::SpectralError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Top-level error; the display prefix names the pipeline stage that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingest: {0}")]
    Ingest(#[from] IngestError),

    #[error("matrices: {0}")]
    Matrix(#[from] MatrixError),

    #[error("spectral: {0}")]
    Spectral(#[from] SpectralError),

    #[error("spectral: window {index}: {source}")]
    Window {
        index: usize,
        #[source]
        source: SpectralError,
    },

    #[error("regression: {0}")]
    Regression(#[from] RegressionError),

    #[error("ensemble: {0}")]
    Ensemble(#[from] EnsembleError),

    #[error("phases: {0}")]
    Phase(#[from] PhaseError),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("output: {0}")]
    Output(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
