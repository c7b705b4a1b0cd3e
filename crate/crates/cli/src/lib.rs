//! Batch pipeline behind the `morphforge` binary: synthetic faces, morph
//! rendering, dataset assembly, detector training and evaluation, attacks
//! and relevance analysis.

pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::JobConfig;
pub use error::{CliError, ErrorKind};
