//! Closed-form KV cache byte accounting.
//!
//! Every number here comes from token counts alone. It never touches the
//! cache types, so the benchmark's counted bytes can be checked against it.

use std::fmt;

use kvquant::CacheConfig;

use crate::error::{BenchError, Result};

/// Bytes per element of the 16-bit baseline.
pub const FP_BYTES: u128 = 2;
/// Bytes for one zero-point plus one scale.
pub const GROUP_PARAM_BYTES: u128 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkloadSpec {
    pub batch: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub layers: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl WorkloadSpec {
    /// 96 layers with hidden size 12288, batch 512, 512 prompt and 32 generated tokens.
    pub fn opt175b() -> Self {
        Self {
            batch: 512,
            prompt_len: 512,
            gen_len: 32,
            layers: 96,
            kv_heads: 96,
            head_dim: 128,
        }
    }

    /// 32 layers, 32 heads of 128 channels, 4096 tokens in total.
    pub fn llama2_7b() -> Self {
        Self {
            batch: 16,
            prompt_len: 4064,
            gen_len: 32,
            layers: 32,
            kv_heads: 32,
            head_dim: 128,
        }
    }

    /// Chat-style lengths (161 prompt, 338 generated) on a small model that
    /// runs quickly on a CPU.
    pub fn sharegpt() -> Self {
        Self {
            batch: 8,
            prompt_len: 161,
            gen_len: 338,
            layers: 2,
            kv_heads: 4,
            head_dim: 32,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "opt175b" => Some(Self::opt175b()),
            "llama2-7b" => Some(Self::llama2_7b()),
            "sharegpt" => Some(Self::sharegpt()),
            _ => None,
        }
    }

    pub fn hidden(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn total_len(&self) -> usize {
        self.prompt_len + self.gen_len
    }

    pub fn with_batch(self, batch: usize) -> Self {
        Self { batch, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("batch", self.batch),
            ("prompt_len", self.prompt_len),
            ("gen_len", self.gen_len),
            ("layers", self.layers),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(BenchError::Workload(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    fn caches(&self) -> u128 {
        self.batch as u128 * self.layers as u128 * self.kv_heads as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheMode {
    Fp16,
    Kivi {
        bits: u8,
        group_size: usize,
        residual: usize,
    },
}

impl CacheMode {
    pub fn kivi(bits: u8) -> Self {
        CacheMode::Kivi {
            bits,
            group_size: 32,
            residual: 128,
        }
    }

    pub fn cache_config(&self, head_dim: usize) -> Result<CacheConfig> {
        Ok(match *self {
            CacheMode::Fp16 => CacheConfig::full_precision(head_dim),
            CacheMode::Kivi {
                bits,
                group_size,
                residual,
            } => CacheConfig::new(bits, group_size, residual, head_dim)?,
        })
    }

    pub fn label(&self) -> String {
        match self {
            CacheMode::Fp16 => "fp16".to_string(),
            CacheMode::Kivi { bits, .. } => format!("kivi-{bits}"),
        }
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheMode::Fp16 => write!(f, "fp16"),
            CacheMode::Kivi {
                bits,
                group_size,
                residual,
            } => {
                write!(f, "kivi-{bits} (group {group_size}, residual {residual})")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Breakdown {
    pub codes: u64,
    pub scales_zeros: u64,
    pub residual: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.codes + self.scales_zeros + self.residual
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryEstimate {
    /// 16-bit baseline at the same token count.
    pub fp_bytes: u64,
    /// Bytes of the cache in the requested mode; always `breakdown.total()`.
    pub cache_bytes: u64,
    pub breakdown: Breakdown,
    pub tokens: usize,
}

impl MemoryEstimate {
    pub fn compression_ratio(&self) -> f64 {
        self.fp_bytes as f64 / self.cache_bytes as f64
    }
}

fn narrow(v: u128) -> Result<u64> {
    // Keep headroom so that sums of a few estimates stay representable.
    if v > i64::MAX as u128 {
        Err(BenchError::Overflow)
    } else {
        Ok(v as u64)
    }
}

/// Bytes held by one head's key and value caches after `tokens` tokens.
fn head_bytes(mode: CacheMode, head_dim: usize, tokens: usize) -> [u128; 3] {
    let (d, l) = (head_dim as u128, tokens as u128);
    match mode {
        CacheMode::Fp16 => [0, 0, 2 * l * d * FP_BYTES],
        CacheMode::Kivi {
            bits,
            group_size,
            residual,
        } => {
            let (b, g, r) = (bits as u128, group_size as u128, residual as u128);
            let key_residual = l % r;
            let value_residual = l.min(r);
            let key_grouped = l - key_residual;
            let value_grouped = l - value_residual;
            let packed = |tokens: u128| (tokens * d * b).div_ceil(8);
            [
                packed(key_grouped) + packed(value_grouped),
                (key_grouped + value_grouped) * d / g * GROUP_PARAM_BYTES,
                (key_residual + value_residual) * d * FP_BYTES,
            ]
        }
    }
}

/// Cache bytes when every sequence holds `tokens` tokens.
pub fn estimate_at(spec: &WorkloadSpec, mode: CacheMode, tokens: usize) -> Result<MemoryEstimate> {
    spec.validate()?;
    mode.cache_config(spec.head_dim)?;
    let n = spec.caches();
    let [codes, params, residual] = head_bytes(mode, spec.head_dim, tokens);
    let breakdown = Breakdown {
        codes: narrow(codes * n)?,
        scales_zeros: narrow(params * n)?,
        residual: narrow(residual * n)?,
    };
    let fp = 2
        * tokens as u128
        * spec.hidden() as u128
        * spec.batch as u128
        * spec.layers as u128
        * FP_BYTES;
    let fp_bytes = narrow(fp)?;
    narrow(breakdown.codes as u128 + breakdown.scales_zeros as u128 + breakdown.residual as u128)?;
    Ok(MemoryEstimate {
        fp_bytes,
        cache_bytes: breakdown.total(),
        breakdown,
        tokens,
    })
}

/// Cache bytes at the end of generation.
pub fn estimate_memory(spec: &WorkloadSpec, mode: CacheMode) -> Result<MemoryEstimate> {
    estimate_at(spec, mode, spec.total_len())
}

/// Largest cache footprint over prefill and every decode step. A key flush
/// shrinks the cache, so the peak can come before the last step.
pub fn estimate_peak_memory(spec: &WorkloadSpec, mode: CacheMode) -> Result<MemoryEstimate> {
    let mut peak = estimate_at(spec, mode, spec.prompt_len)?;
    for tokens in spec.prompt_len + 1..=spec.total_len() {
        let e = estimate_at(spec, mode, tokens)?;
        if e.cache_bytes >= peak.cache_bytes {
            peak = e;
        }
    }
    Ok(peak)
}

/// Largest batch whose peak cache footprint fits in `budget` bytes.
pub fn max_batch_at_budget(template: &WorkloadSpec, budget: u64, mode: CacheMode) -> Result<usize> {
    let fits = |batch: usize| -> Result<bool> {
        Ok(estimate_peak_memory(&template.with_batch(batch), mode)?.cache_bytes <= budget)
    };
    if !fits(1)? {
        let needed = estimate_peak_memory(&template.with_batch(1), mode)?.cache_bytes;
        return Err(BenchError::Budget {
            step: "a single request".into(),
            needed,
            budget,
        });
    }
    let mut lo = 1usize;
    let mut hi = 2usize;
    loop {
        match fits(hi) {
            Ok(true) => {
                lo = hi;
                hi *= 2;
            }
            Ok(false) | Err(BenchError::Overflow) => break,
            Err(e) => return Err(e),
        }
    }
    // Invariant: lo fits, hi does not.
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        match fits(mid) {
            Ok(true) => lo = mid,
            Ok(false) | Err(BenchError::Overflow) => hi = mid,
            Err(e) => return Err(e),
        }
    }
    Ok(lo)
}
