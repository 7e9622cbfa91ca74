//! Streaming quantized KV cache for one (batch, layer, head).
//!
//! Keys: a per-channel quantized part whose token count is always a multiple
//! of the residual length `R`, plus a full-precision residual of at most
//! `R - 1` tokens. When the residual reaches `R` tokens it is quantized as one
//! block and the residual is reset to empty.
//!
//! Values: a per-token quantized part plus a FIFO of the `R` most recent
//! tokens. Each append beyond `R` pops the oldest token into the quantized
//! part.
//!
//! Quantized parts are append-only; groups are never re-quantized.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quant::{pack, quantize_matrix, Axis, QuantParams, QuantizedTensor};

/// Bytes charged per stored zero-point and per stored scale.
pub const PARAM_BYTES: u64 = 2;
/// Bytes charged per full-precision element.
pub const FP_ELEMENT_BYTES: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    bits: u8,
    group_size: usize,
    residual_length: usize,
    head_dim: usize,
    full_precision: bool,
}

impl CacheConfig {
    pub fn new(
        bits: u8,
        group_size: usize,
        residual_length: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if !pack::is_packable(bits) {
            return Err(Error::Config(format!(
                "bit width {bits} has no packed layout (use 1, 2, 4 or 8)"
            )));
        }
        if group_size == 0 || residual_length == 0 || head_dim == 0 {
            return Err(Error::Config(
                "group size, residual length and head dim must be positive".into(),
            ));
        }
        if !residual_length.is_multiple_of(group_size) {
            return Err(Error::Config(format!(
                "residual length {residual_length} is not divisible by group size {group_size}"
            )));
        }
        if !head_dim.is_multiple_of(group_size) {
            return Err(Error::Config(format!(
                "head dim {head_dim} is not divisible by group size {group_size}"
            )));
        }
        Ok(Self {
            bits,
            group_size,
            residual_length,
            head_dim,
            full_precision: false,
        })
    }

    /// A cache that never quantizes: every token stays in the residual.
    pub fn full_precision(head_dim: usize) -> Self {
        Self {
            bits: 8,
            group_size: 1,
            residual_length: 1,
            head_dim,
            full_precision: true,
        }
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn residual_length(&self) -> usize {
        self.residual_length
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn is_full_precision(&self) -> bool {
        self.full_precision
    }

    fn params(&self, axis: Axis) -> QuantParams {
        QuantParams::new(self.bits, self.group_size, axis).expect("validated in CacheConfig::new")
    }

    fn check_width(&self, m: &Matrix, what: &str) -> Result<()> {
        if m.cols() != self.head_dim {
            return Err(Error::Shape(format!(
                "{what} has {} channels, cache head dim is {}",
                m.cols(),
                self.head_dim
            )));
        }
        Ok(())
    }

    fn check_token(&self, t: &Matrix, what: &str) -> Result<()> {
        if t.rows() != 1 {
            return Err(Error::Shape(format!(
                "{what} must be a single token, got {} rows",
                t.rows()
            )));
        }
        self.check_width(t, what)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeyCacheState {
    cfg: CacheConfig,
    grouped: QuantizedTensor,
    residual: Matrix,
}

impl KeyCacheState {
    pub fn new(cfg: CacheConfig) -> Self {
        Self {
            cfg,
            grouped: QuantizedTensor::empty(cfg.params(Axis::PerChannel), cfg.head_dim)
                .expect("per-channel tensors accept any width"),
            residual: Matrix::empty(cfg.head_dim),
        }
    }

    /// Splits `keys` into `l - (l mod R)` quantized tokens and the residual.
    pub fn prefill(keys: &Matrix, cfg: CacheConfig) -> Result<Self> {
        cfg.check_width(keys, "keys")?;
        let mut state = Self::new(cfg);
        if cfg.full_precision {
            state.residual = keys.clone();
            return Ok(state);
        }
        let l = keys.rows();
        let split = l - l % cfg.residual_length;
        state.grouped = quantize_matrix(&keys.slice_rows(0..split)?, cfg.params(Axis::PerChannel))?;
        state.residual = keys.slice_rows(split..l)?;
        Ok(state)
    }

    pub fn append(&mut self, t_k: &Matrix) -> Result<()> {
        self.cfg.check_token(t_k, "key token")?;
        self.residual.push_row(t_k.row(0));
        if !self.cfg.full_precision && self.residual.rows() == self.cfg.residual_length {
            let block = quantize_matrix(&self.residual, self.cfg.params(Axis::PerChannel))?;
            self.grouped.append(&block)?;
            self.residual.clear_rows();
        }
        Ok(())
    }

    pub fn config(&self) -> CacheConfig {
        self.cfg
    }

    pub fn grouped(&self) -> &QuantizedTensor {
        &self.grouped
    }

    pub fn residual(&self) -> &Matrix {
        &self.residual
    }

    pub fn len(&self) -> usize {
        self.grouped.rows() + self.residual.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All keys in token order: dequantized grouped part, then the residual.
    pub fn materialize(&self) -> Matrix {
        self.grouped
            .dequantize()
            .vstack(&self.residual)
            .expect("same head dim")
    }

    pub fn memory_bytes(&self) -> u64 {
        stored_bytes(&self.grouped, &self.residual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueCacheState {
    cfg: CacheConfig,
    grouped: QuantizedTensor,
    residual: Matrix,
}

impl ValueCacheState {
    pub fn new(cfg: CacheConfig) -> Self {
        Self {
            cfg,
            grouped: QuantizedTensor::empty(cfg.params(Axis::PerToken), cfg.head_dim)
                .expect("head dim divisible by group size"),
            residual: Matrix::empty(cfg.head_dim),
        }
    }

    /// Quantizes all but the last `R` tokens; with `l <= R` nothing is
    /// quantized.
    pub fn prefill(values: &Matrix, cfg: CacheConfig) -> Result<Self> {
        cfg.check_width(values, "values")?;
        let mut state = Self::new(cfg);
        if cfg.full_precision {
            state.residual = values.clone();
            return Ok(state);
        }
        let l = values.rows();
        let split = l.saturating_sub(cfg.residual_length);
        state.grouped = quantize_matrix(&values.slice_rows(0..split)?, cfg.params(Axis::PerToken))?;
        state.residual = values.slice_rows(split..l)?;
        Ok(state)
    }

    pub fn append(&mut self, t_v: &Matrix) -> Result<()> {
        self.cfg.check_token(t_v, "value token")?;
        self.residual.push_row(t_v.row(0));
        let r = self.cfg.residual_length;
        if !self.cfg.full_precision && self.residual.rows() > r {
            let overflow = self.residual.rows() - r;
            let popped = self.residual.slice_rows(0..overflow)?;
            self.grouped
                .append(&quantize_matrix(&popped, self.cfg.params(Axis::PerToken))?)?;
            self.residual.drop_front_rows(overflow);
        }
        Ok(())
    }

    pub fn config(&self) -> CacheConfig {
        self.cfg
    }

    pub fn grouped(&self) -> &QuantizedTensor {
        &self.grouped
    }

    pub fn residual(&self) -> &Matrix {
        &self.residual
    }

    pub fn len(&self) -> usize {
        self.grouped.rows() + self.residual.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn materialize(&self) -> Matrix {
        self.grouped
            .dequantize()
            .vstack(&self.residual)
            .expect("same head dim")
    }

    pub fn memory_bytes(&self) -> u64 {
        stored_bytes(&self.grouped, &self.residual)
    }
}

fn stored_bytes(grouped: &QuantizedTensor, residual: &Matrix) -> u64 {
    grouped.packed_bytes().len() as u64
        + 2 * PARAM_BYTES * grouped.group_count() as u64
        + FP_ELEMENT_BYTES * residual.as_slice().len() as u64
}

/// Key and value caches of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub keys: KeyCacheState,
    pub values: ValueCacheState,
}

impl KvCache {
    pub fn new(cfg: CacheConfig) -> Self {
        Self {
            keys: KeyCacheState::new(cfg),
            values: ValueCacheState::new(cfg),
        }
    }

    /// Builds the cache from a prompt. The caller keeps `keys` and `values`
    /// unmodified for the rest of the prefill computation.
    pub fn prefill(keys: &Matrix, values: &Matrix, cfg: CacheConfig) -> Result<Self> {
        if keys.rows() == 0 {
            return Err(Error::Usage("prefill needs at least one token".into()));
        }
        if keys.rows() != values.rows() {
            return Err(Error::Shape(format!(
                "{} key tokens vs {} value tokens",
                keys.rows(),
                values.rows()
            )));
        }
        Ok(Self {
            keys: KeyCacheState::prefill(keys, cfg)?,
            values: ValueCacheState::prefill(values, cfg)?,
        })
    }

    pub fn append_token(&mut self, t_k: &Matrix, t_v: &Matrix) -> Result<()> {
        let cfg = self.config();
        cfg.check_token(t_k, "key token")?;
        cfg.check_token(t_v, "value token")?;
        self.keys.append(t_k)?;
        self.values.append(t_v)
    }

    pub fn config(&self) -> CacheConfig {
        self.keys.cfg
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn memory_bytes(&self) -> u64 {
        self.keys.memory_bytes() + self.values.memory_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.gen_range(-2.0f32..2.0))
                .collect(),
        )
        .unwrap()
    }

    fn token(m: &Matrix, i: usize) -> Matrix {
        m.slice_rows(i..i + 1).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(matches!(
            CacheConfig::new(2, 32, 100, 128),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            CacheConfig::new(2, 32, 128, 48),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            CacheConfig::new(3, 32, 128, 128),
            Err(Error::Config(_))
        ));
        assert!(CacheConfig::new(2, 32, 128, 128).is_ok());
    }

    #[test]
    fn prefill_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cases = [
            // (l, R, G, key grouped, key residual, value grouped, value residual)
            (5, 4, 2, 4, 1, 1, 4),
            (3, 4, 2, 0, 3, 0, 3),
            (8, 4, 4, 8, 0, 4, 4),
        ];
        for (l, r, g, kg, kr, vg, vr) in cases {
            let cfg = CacheConfig::new(2, g, r, 4).unwrap();
            let (k, v) = (random(&mut rng, l, 4), random(&mut rng, l, 4));
            let cache = KvCache::prefill(&k, &v, cfg).unwrap();
            assert_eq!(cache.keys.grouped().rows(), kg);
            assert_eq!(cache.keys.residual().rows(), kr);
            assert_eq!(cache.values.grouped().rows(), vg);
            assert_eq!(cache.values.residual().rows(), vr);
            assert_eq!(cache.keys.residual(), &k.slice_rows(kg..l).unwrap());
            assert_eq!(cache.values.residual(), &v.slice_rows(vg..l).unwrap());
        }
        let cfg = CacheConfig::new(2, 2, 4, 2).unwrap();
        let (k, v) = (random(&mut rng, 5, 2), random(&mut rng, 5, 2));
        // 4 tokens x 2 channels at G = 2: two groups per channel.
        assert_eq!(
            KvCache::prefill(&k, &v, cfg)
                .unwrap()
                .keys
                .grouped()
                .group_count(),
            4
        );
    }

    #[test]
    fn prefill_errors() {
        let cfg = CacheConfig::new(2, 2, 4, 4).unwrap();
        assert!(matches!(
            KvCache::prefill(&Matrix::empty(4), &Matrix::empty(4), cfg),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            KvCache::prefill(&Matrix::zeros(2, 4), &Matrix::zeros(3, 4), cfg),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            KvCache::prefill(&Matrix::zeros(2, 6), &Matrix::zeros(2, 6), cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn two_appends_flush_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = CacheConfig::new(2, 2, 2, 4).unwrap();
        let mut cache = KvCache::new(cfg);
        let toks = random(&mut rng, 2, 4);
        cache
            .append_token(&token(&toks, 0), &token(&toks, 0))
            .unwrap();
        assert_eq!(cache.keys.residual().rows(), 1);
        cache
            .append_token(&token(&toks, 1), &token(&toks, 1))
            .unwrap();
        assert_eq!(cache.keys.residual().rows(), 0);
        assert_eq!(cache.keys.grouped().rows(), 2);
        assert_eq!(cache.keys.grouped().group_count(), 4);
        assert_eq!(cache.values.residual(), &toks);
        assert_eq!(cache.values.grouped().rows(), 0);
    }

    #[test]
    fn value_queue_pops_oldest() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = CacheConfig::new(8, 2, 4, 4).unwrap();
        let seq = random(&mut rng, 5, 4);
        let mut values = ValueCacheState::prefill(&seq.slice_rows(0..4).unwrap(), cfg).unwrap();
        assert_eq!(values.residual().rows(), 4);
        values.append(&token(&seq, 4)).unwrap();
        assert_eq!(values.grouped().rows(), 1);
        assert_eq!(values.residual(), &seq.slice_rows(1..5).unwrap());
    }

    #[test]
    fn append_after_prefill() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = CacheConfig::new(2, 4, 4, 4).unwrap();
        let (k, v) = (random(&mut rng, 8, 4), random(&mut rng, 8, 4));
        let mut cache = KvCache::prefill(&k, &v, cfg).unwrap();
        let t = random(&mut rng, 1, 4);
        cache.append_token(&t, &t).unwrap();
        assert_eq!(cache.keys.residual().rows(), 1);
        assert!(cache.values.residual().rows() <= 4);
        assert_eq!(cache.len(), 9);
    }

    #[test]
    fn append_shape_errors() {
        let cfg = CacheConfig::new(2, 2, 4, 4).unwrap();
        let mut cache = KvCache::new(cfg);
        assert!(matches!(
            cache.append_token(&Matrix::zeros(1, 3), &Matrix::zeros(1, 4)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            cache.append_token(&Matrix::zeros(2, 4), &Matrix::zeros(2, 4)),
            Err(Error::Shape(_))
        ));
        assert!(cache.is_empty());
    }

    #[test]
    fn materialize_residual_is_exact_and_grouped_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CacheConfig::new(8, 4, 8, 8).unwrap();
        let (k, v) = (random(&mut rng, 21, 8), random(&mut rng, 21, 8));
        let cache = KvCache::prefill(&k, &v, cfg).unwrap();
        let mk = cache.keys.materialize();
        assert_eq!(
            mk.slice_rows(16..21).unwrap(),
            k.slice_rows(16..21).unwrap()
        );
        let grouped = cache.keys.grouped();
        for (g, &s) in grouped.scales().iter().enumerate() {
            let (block, col) = (g / 8, g % 8);
            for t in 0..4 {
                let row = block * 4 + t;
                assert!(((mk.get(row, col) - k.get(row, col)).abs() as f64) <= s / 2.0 + 1e-6);
            }
        }
        let mv = cache.values.materialize();
        assert_eq!(
            mv.slice_rows(13..21).unwrap(),
            v.slice_rows(13..21).unwrap()
        );
    }

    #[test]
    fn memory_accounting() {
        let cfg = CacheConfig::new(2, 32, 128, 128).unwrap();
        assert_eq!(KvCache::new(cfg).memory_bytes(), 0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (k, v) = (random(&mut rng, 4096, 128), random(&mut rng, 4096, 128));
        let cache = KvCache::prefill(&k, &v, cfg).unwrap();
        // 4096 % 128 == 0, so the key residual is empty; the value queue holds 128.
        let key_bytes = 4096 * 128 * 2 / 8 + 4 * (4096 / 32) * 128;
        let value_bytes = 3968 * 128 * 2 / 8 + 4 * 3968 * (128 / 32) + 2 * 128 * 128;
        assert_eq!(cache.keys.memory_bytes(), key_bytes as u64);
        assert_eq!(cache.values.memory_bytes(), value_bytes as u64);
        let fp = 2 * 2 * 4096 * 128;
        let ratio = fp as f64 / cache.memory_bytes() as f64;
        assert!((ratio - 131072.0 / 26240.0).abs() < 1e-9, "{ratio}");

        // Grouped storage at 4 bits costs 4 + 2*16/32 = 5 bits per element.
        let cfg4 = CacheConfig::new(4, 32, 128, 128).unwrap();
        let keys4 = KeyCacheState::prefill(&k, cfg4).unwrap();
        assert_eq!(keys4.memory_bytes() * 8, 5 * 4096 * 128);
    }

    #[test]
    fn full_precision_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = CacheConfig::full_precision(4);
        let (k, v) = (random(&mut rng, 10, 4), random(&mut rng, 10, 4));
        let mut cache = KvCache::prefill(&k, &v, cfg).unwrap();
        cache.append_token(&token(&k, 0), &token(&v, 0)).unwrap();
        assert_eq!(cache.keys.residual().rows(), 11);
        assert_eq!(cache.values.residual().rows(), 11);
        assert_eq!(cache.memory_bytes(), 2 * 2 * 11 * 4);
    }
}
