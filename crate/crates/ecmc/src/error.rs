use std::path::{Path, PathBuf};

use ecmc_core::Error as CoreError;

/// Process exit codes. Stable across versions.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("check failed: {0}")]
    Check(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {}: {detail}", path.display())]
    Io { path: PathBuf, detail: String },
    #[error("parse error: {} ({location}): {detail}", path.display())]
    Format {
        path: PathBuf,
        location: String,
        detail: String,
    },
    #[error("training diverged: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => exit::CHECK_FAILED,
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } | CliError::Format { .. } => exit::IO,
            CliError::Divergence(_) => exit::DIVERGENCE,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            detail: err.to_string(),
        }
    }

    pub fn format(path: &Path, location: impl Into<String>, detail: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            location: location.into(),
            detail: detail.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Divergence { .. } | CoreError::NonFiniteGradient { .. } | CoreError::NonFinite { .. } => {
                CliError::Divergence(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
