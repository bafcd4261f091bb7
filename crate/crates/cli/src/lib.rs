//! Command-line driver: config files, run manifests and the five subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::execute;
pub use config::{Command, ExperimentConfig, RawConfig};
pub use error::{CliError, Result};
pub use manifest::{verify_checksums, RunManifest, Status, MANIFEST_FILE};
