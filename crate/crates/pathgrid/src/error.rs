use std::path::PathBuf;

use pathgrid_core::corpus::CorpusError;
use pathgrid_core::decoder::DecodeError;
use pathgrid_core::model::ModelError;
use pathgrid_core::twinsim::SimError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {msg}", path.display())]
    Record { path: PathBuf, line: usize, msg: String },
    #[error("{}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl Error {
    /// Stable machine-readable code printed by the command line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IO",
            Error::Record { .. } => "RECORD",
            Error::Checkpoint { .. } => "CHECKPOINT",
            Error::Config(_) => "CONFIG",
            Error::Usage(_) => "USAGE",
            Error::Mismatch(_) => "MISMATCH",
            Error::Corpus(_) => "CORPUS",
            Error::Model(_) => "MODEL",
            Error::Decode(_) => "DECODE",
            Error::Sim(_) => "SIM",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
