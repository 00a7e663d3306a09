//! Batch front end for reverse-classification-accuracy quality control.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_phantom, cmd_refsize, cmd_run, EXIT_CASE_ERROR, EXIT_CONFIG, EXIT_OK};
pub use config::{ConfigError, Overrides, RunConfig};
