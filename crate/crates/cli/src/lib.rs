//! Batch experiment driver. Every subcommand reads one [`ExperimentConfig`],
//! consumes upstream artifacts from the output directory and writes its own
//! next to them, alongside a resolved config copy and a hash manifest.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use config::ExperimentConfig;
