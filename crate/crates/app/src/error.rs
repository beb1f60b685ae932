use std::path::{Path, PathBuf};

use thiserror::Error;

pub type AppResult<T> = std::result::Result<T, AppError>;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] clauserec_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing artifact {path}; run `clauserec {command}` first")]
    MissingArtifact { path: PathBuf, command: &'static str },

    #[error(
        "artifact {path} was produced from different inputs (fingerprint {found}, expected {expected}); \
         rerun `clauserec {command}` to rebuild it"
    )]
    FingerprintMismatch {
        path: PathBuf,
        expected: String,
        found: String,
        command: &'static str,
    },

    #[error("malformed artifact {path}: {source}")]
    BadArtifact {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Input(String),
}

impl AppError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
