use std::path::{Path, PathBuf};

use thiserror::Error;

/// Every variant renders on one line with a distinct leading prefix.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing file: {path}: {source}")]
    MissingFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Core(sicot_core::Error),
}

impl CliError {
    pub fn missing(path: &Path, source: std::io::Error) -> Self {
        CliError::MissingFile {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// A core error about a file that does not exist becomes `missing file`.
impl From<sicot_core::Error> for CliError {
    fn from(err: sicot_core::Error) -> Self {
        match err {
            sicot_core::Error::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingFile { path, source }
            }
            other => CliError::Core(other),
        }
    }
}
