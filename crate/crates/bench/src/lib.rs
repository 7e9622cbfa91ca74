//! Memory estimation, synthetic decode benchmarking and tensor dump IO for
//! the `kvquant` cache.

pub mod cli;
pub mod dump;
pub mod error;
pub mod memory;
pub mod report;
pub mod workload;

pub use error::{BenchError, Result};
