//! File formats, run configuration, the training driver and the
//! subcommands behind the `rfp` binary.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod gradsuite;
pub mod train;
pub mod volume;

pub use error::{CliError, CliResult};
