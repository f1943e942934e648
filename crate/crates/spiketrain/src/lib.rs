//! File formats, configuration and the command line for `spiketrain-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod events;
pub mod idx;
pub mod metrics;

pub use error::{CliError, ExitCode};
pub use spiketrain_core as core;
