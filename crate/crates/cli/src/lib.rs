//! Library side of the `cbsa` binary, so commands can be driven from tests.

pub mod commands;
pub mod config;
pub mod summary;

use std::path::{Path, PathBuf};

use cbsa_core::CbsaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CbsaError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for invalid input or configuration, 3 for a diverged run, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                CbsaError::Spec(_) | CbsaError::EmptyLabeled | CbsaError::Domain(_) => 2,
                CbsaError::NonFiniteLoss { .. } | CbsaError::Numeric(_) => 3,
                _ => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
