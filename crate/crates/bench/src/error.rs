use std::io;

use thiserror::Error;

use crate::dump::FormatError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] kvquant::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("memory budget of {budget} bytes exceeded at {step}: {needed} bytes needed")]
    Budget {
        step: String,
        needed: u64,
        budget: u64,
    },
    #[error("invalid workload: {0}")]
    Workload(String),
    #[error("byte count overflows 64 bits")]
    Overflow,
}

pub type Result<T> = std::result::Result<T, BenchError>;
