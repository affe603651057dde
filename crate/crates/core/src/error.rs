use std::path::PathBuf;

use thiserror::Error;

use crate::training::TrainReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unknown user {0}")]
    UnknownUser(String),

    #[error("unknown item {0}")]
    UnknownItem(String),

    #[error("sampling failed for user {user}: {message}")]
    Sampling { user: String, message: String },

    #[error("feature format error in {path}:{line} (item {item}): {message}")]
    FeatureFormat {
        path: PathBuf,
        line: usize,
        item: String,
        message: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("variant {variant} does not support {operation}")]
    UnsupportedVariant { variant: String, operation: &'static str },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize, report: Box<TrainReport> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from invalid user input (config, ids,
    /// mismatched checkpoint) rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::UnknownUser(_)
                | Error::UnknownItem(_)
                | Error::UnsupportedVariant { .. }
                | Error::Precondition(_)
        )
    }
}
