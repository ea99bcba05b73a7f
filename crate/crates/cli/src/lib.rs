//! Experiment harness for `ntks-core`: config parsing, the experiment pipeline
//! and the `ntks` subcommands.

pub mod app;
pub mod config;
pub mod error;
pub mod experiments;
pub mod report;

pub use app::{run, Cli, Command, RunSummary};
pub use config::{parse_config, parse_config_str, ExperimentConfig, TargetSource, Variant};
pub use error::{CliError, Result};
