//! Library side of the `hit` command: run configuration, error to exit-code
//! mapping and the subcommand implementations.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
