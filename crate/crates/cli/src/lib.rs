//! Command-line orchestration for the `qclt` binary: configuration files,
//! subcommands and reproducible result files.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use error::CliError;
