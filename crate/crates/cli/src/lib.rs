//! Config-driven front end: `simulate`, `optimize`, `sweep` and `benchmark`.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::RunConfig;
pub use error::CliError;
