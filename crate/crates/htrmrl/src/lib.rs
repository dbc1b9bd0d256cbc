//! File formats, run directories and subcommands around `htrmrl-core`.
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod results;
pub mod trajectory;

pub use error::{AppError, AppResult};
