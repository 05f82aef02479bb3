use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped by the process exit code the CLI maps them to:
/// configuration problems (2), data problems (3) and numeric failures (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("expansion error: {0}")]
    Expansion(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("insufficient history: {0}")]
    InsufficientHistory(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("package error: {0}")]
    Package(String),

    #[error("reconstruction error: {0}")]
    Reconstruction(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Selection(_) | Error::Expansion(_) => 2,
            Error::Data(_)
            | Error::Io { .. }
            | Error::Serde(_)
            | Error::Sampling(_)
            | Error::Package(_)
            | Error::Registry(_)
            | Error::Lookup(_)
            | Error::Pipeline(_)
            | Error::Reconstruction(_)
            | Error::Inference(_)
            | Error::InsufficientHistory(_) => 3,
            Error::Numeric(_) | Error::TrainingAborted(_) => 4,
        }
    }
}
