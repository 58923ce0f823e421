use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure in {primitive}: {detail}")]
    NumericFailure { primitive: String, detail: String },

    #[error("training diverged at step {step}: {detail}")]
    TrainingFailure { step: usize, detail: String },

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(primitive: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NumericFailure {
            primitive: primitive.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::Dependency(_) => 3,
            Error::NumericFailure { .. } | Error::TrainingFailure { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
