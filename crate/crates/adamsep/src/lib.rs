//! Command-line front end for `adamsep-core`: JSON configuration, parallel
//! ensemble drivers and deterministic CSV/JSON artifacts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;
pub mod parallel;
pub mod suite;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => commands::EXIT_CONFIG,
            CliError::Io(_) | CliError::Runtime(_) => commands::EXIT_FAILED,
        }
    }
}
