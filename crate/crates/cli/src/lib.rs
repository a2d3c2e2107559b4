//! Command-line driver, pipeline runner and HTTP API for voxstream.

pub mod cli;
pub mod error;
pub mod ops;
pub mod pipeline;
pub mod server;

pub use error::{CliError, Result};

/// Default memory budget for caches: 1 GiB.
pub const DEFAULT_BUDGET: usize = 1 << 30;
