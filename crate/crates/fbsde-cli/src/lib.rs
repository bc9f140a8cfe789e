//! Library surface of the command-line front end: config parsing and job
//! execution, reused by the `fbsde` binary and its tests.

pub mod config;
pub mod jobs;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("solver error: {0}")]
    Solver(#[from] fbsde::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Solver(_) => 4,
        }
    }
}

/// Exit code for compare/crosscheck band violations.
pub const VIOLATION_EXIT: u8 = 5;
