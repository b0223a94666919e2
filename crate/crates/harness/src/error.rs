use std::path::PathBuf;

use thiserror::Error;

/// Failures of a harness run. Every variant maps to a nonzero exit status.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// The configuration is malformed or out of range; `key` names the
    /// offending entry.
    #[error("invalid config key `{key}`: {message}")]
    ConfigInvalid { key: String, message: String },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Metric files disagree on their columns or iteration index.
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error(transparent)]
    Core(#[from] fisar_core::Error),
}

impl HarnessError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        HarnessError::ConfigInvalid { key: key.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
