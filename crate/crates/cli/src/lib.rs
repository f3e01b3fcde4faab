//! Command-line front end: configuration parsing, the five pipeline
//! commands, and native SVG charting. The binary in `main.rs` is a thin
//! argument-parsing shell over [`commands`].

pub mod commands;
pub mod config;
pub mod svg;

use thiserror::Error;

/// Failure categories with stable process exit codes: configuration
/// problems exit 2, numerical aborts exit 3, missing artifacts exit 4,
/// anything else exits 1.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical abort: {0}")]
    Numeric(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}
