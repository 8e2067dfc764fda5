//! Staged driver for the surface-to-price pipeline: surface construction,
//! SVD analysis, oracle pricing, three-stage training and evaluation.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
