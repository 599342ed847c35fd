use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(ladelab::Error),

    #[error("{0}")]
    Core(ladelab::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, detail: impl ToString) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        }
    }

    /// 2 for configuration problems, 3 for numeric failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } | CliError::Format { .. } => 4,
        }
    }
}

impl From<ladelab::Error> for CliError {
    fn from(e: ladelab::Error) -> Self {
        match e {
            ladelab::Error::NonFinite { .. } | ladelab::Error::Domain { .. } => {
                CliError::Numeric(e)
            }
            other => CliError::Core(other),
        }
    }
}
