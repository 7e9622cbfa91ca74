use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid usage: {0}")]
    Usage(String),
    #[error("invalid cache configuration: {0}")]
    Config(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
