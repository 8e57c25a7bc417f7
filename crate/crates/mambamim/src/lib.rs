//! Pre-training harness around `mambamim-core`: run configuration, the
//! checkpoint and volume file formats, metrics output and the subcommands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;
pub mod volume;
