//! Command-line surface of the pipeline.

pub mod commands;
pub mod config;
pub mod error;
pub mod oracle;
pub mod plot;

pub use commands::{run, Cli};
pub use config::RunConfig;
pub use error::CliError;
