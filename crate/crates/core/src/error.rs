use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit. Variants map onto the error categories the
/// command line reports (configuration, divergence, invariant breach).
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("manifest row {row}, field `{field}`: {reason}")]
    Validation {
        row: usize,
        field: String,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("environment error: {message}\n  remediation: {remediation}")]
    Environment {
        message: String,
        remediation: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("version error: {0}")]
    Version(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("ROC undefined: {0}")]
    UndefinedRoc(String),

    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
