//! Command-line driver: config parsing, pretraining, unlearning runs,
//! quantization passes and the ablation and step-size grids.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
