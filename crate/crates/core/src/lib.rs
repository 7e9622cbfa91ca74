//! Asymmetric low-bit KV-cache quantization.
//!
//! Keys are quantized per channel and values per token, each into a grouped
//! packed part plus a short full-precision residual window that absorbs the
//! streaming tail. [`attention::decode_attention`] runs the decode step
//! directly against that hybrid layout.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod kvcache;
pub mod numerics;
pub mod quant;

pub use error::{Error, Result};
pub use kvcache::{CacheConfig, KeyCacheState, ValueCacheState};
pub use numerics::Matrix;
pub use quant::{Axis, QuantParams, QuantizedTensor};
