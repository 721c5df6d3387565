use grail_core::GrailError;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Grail(#[from] GrailError),
    #[error("{path}: invalid config at `{pointer}`: {message}")]
    Config {
        path: PathBuf,
        pointer: String,
        message: String,
    },
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Grail(e) => e.exit_code(),
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::Read { .. } | CliError::Write { .. } => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
