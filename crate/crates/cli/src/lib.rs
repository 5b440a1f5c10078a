//! Experiment driver: configuration, the training loop, and the commands
//! behind the `ibtpo` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod train;

pub use error::{CliError, Result};
