//! Crate-wide error type aggregating the per-domain enums.

use thiserror::Error;

/// Any failure the library can report.
#[derive(Error, Debug)]
pub enum Error {
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Eval(#[from] crate::metrics::EvalError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: config problems 2, data problems 3,
    /// everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Train(crate::train::TrainError::MissingPretrainedEstimator) => 2,
            Error::Data(_) | Error::Eval(_) => 3,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<std::path::PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
