//! Decode-step attention over the hybrid quantized/full-precision cache.
//!
//! Logits against the quantized keys and the weighted sum over quantized
//! values are computed tile by tile, one quantization group per tile, so each
//! zero-point/scale pair is loaded once and no dequantized copy of the cache
//! is ever built. Softmax runs once over the concatenated logit row.
//!
//! Every accumulation runs in the same order as [`reference_attention`], so
//! the fused path agrees with dequantize-then-compute to the last bit.

use crate::error::{Error, Result};
use crate::kvcache::KvCache;
use crate::numerics::{axpy, dot, softmax_in_place, Matrix};
use crate::quant::{dequantize_value, Axis, QuantizedTensor};

/// Query, key and value projections of the current token.
#[derive(Debug, Clone)]
pub struct DecodeInputs {
    pub t_q: Matrix,
    pub t_k: Matrix,
    pub t_v: Matrix,
}

impl DecodeInputs {
    pub fn new(t_q: Matrix, t_k: Matrix, t_v: Matrix) -> Result<Self> {
        let d = t_q.cols();
        for (name, t) in [("query", &t_q), ("key", &t_k), ("value", &t_v)] {
            if t.rows() != 1 || t.cols() != d {
                return Err(Error::Shape(format!(
                    "{name} is {}x{}, expected 1x{d}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        Ok(Self { t_q, t_k, t_v })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionOptions {
    /// Multiply logits by `1/sqrt(head_dim)`.
    pub scale_logits: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        Self { scale_logits: true }
    }
}

impl AttentionOptions {
    pub fn unscaled() -> Self {
        Self {
            scale_logits: false,
        }
    }

    fn logit_scale(&self, head_dim: usize) -> Option<f32> {
        self.scale_logits.then(|| 1.0 / (head_dim as f32).sqrt())
    }
}

/// Attention weights over every cached token and the resulting output.
#[derive(Debug, Clone)]
pub struct Attended {
    pub weights: Vec<f32>,
    pub output: Matrix,
}

/// Appends the current token to `cache`, then attends over the whole cache.
pub fn decode_attention(
    inputs: &DecodeInputs,
    cache: &mut KvCache,
    opts: AttentionOptions,
) -> Result<Matrix> {
    cache.append_token(&inputs.t_k, &inputs.t_v)?;
    Ok(attend(&inputs.t_q, cache, opts)?.output)
}

/// Attends over the current cache contents without modifying it.
pub fn attend(t_q: &Matrix, cache: &KvCache, opts: AttentionOptions) -> Result<Attended> {
    let d = cache.config().head_dim();
    if t_q.rows() != 1 || t_q.cols() != d {
        return Err(Error::Shape(format!(
            "query is {}x{}, expected 1x{d}",
            t_q.rows(),
            t_q.cols()
        )));
    }
    let q = t_q.row(0);
    let keys = &cache.keys;
    let n_grouped = keys.grouped().rows();

    let mut weights = vec![0.0f32; keys.len()];
    quantized_key_logits(q, keys.grouped(), &mut weights[..n_grouped]);
    for (slot, k) in weights[n_grouped..]
        .iter_mut()
        .zip(keys.residual().iter_rows())
    {
        *slot = dot(q, k);
    }
    if let Some(scale) = opts.logit_scale(d) {
        weights.iter_mut().for_each(|w| *w *= scale);
    }
    softmax_in_place(&mut weights);

    let values = &cache.values;
    // The value split differs from the key split; slice by the value
    // residual's actual length.
    let v_grouped = values.grouped().rows();
    let mut out = vec![0.0f32; d];
    quantized_weighted_values(&weights[..v_grouped], values.grouped(), &mut out);
    for (&w, v) in weights[v_grouped..]
        .iter()
        .zip(values.residual().iter_rows())
    {
        axpy(w, v, &mut out);
    }
    Ok(Attended {
        weights,
        output: Matrix::from_parts(1, d, out),
    })
}

/// `logits[t] += q . dequant(K[t])` over a per-channel quantized key block,
/// one group of `G` tokens in one channel per tile.
fn quantized_key_logits(q: &[f32], keys: &QuantizedTensor, logits: &mut [f32]) {
    debug_assert_eq!(keys.params().axis(), Axis::PerChannel);
    let g = keys.params().group_size();
    let d = keys.cols();
    let codes = keys.codes();
    let mut tile = vec![0u8; g];
    for block in 0..keys.rows() / g {
        let block_logits = &mut logits[block * g..(block + 1) * g];
        for (c, &qc) in q.iter().enumerate() {
            let group = block * d + c;
            let (zero, scale) = (keys.zeros()[group], keys.scales()[group]);
            codes.read_into(group * g, &mut tile);
            for (logit, &code) in block_logits.iter_mut().zip(&tile) {
                *logit += qc * dequantize_value(code, zero, scale);
            }
        }
    }
}

/// `out += sum_t w[t] * dequant(V[t])` over a per-token quantized value
/// block, one group of `G` channels in one token per tile.
fn quantized_weighted_values(weights: &[f32], values: &QuantizedTensor, out: &mut [f32]) {
    debug_assert_eq!(values.params().axis(), Axis::PerToken);
    let g = values.params().group_size();
    let blocks = values.cols() / g;
    let codes = values.codes();
    let mut tile = vec![0u8; g];
    for (t, &w) in weights.iter().enumerate() {
        for block in 0..blocks {
            let group = t * blocks + block;
            let (zero, scale) = (values.zeros()[group], values.scales()[group]);
            codes.read_into(group * g, &mut tile);
            for (o, &code) in out[block * g..(block + 1) * g].iter_mut().zip(&tile) {
                *o += w * dequantize_value(code, zero, scale);
            }
        }
    }
}

/// Full-precision `softmax(t_q K^T) V`.
pub fn reference_attention(t_q: &Matrix, keys: &Matrix, values: &Matrix) -> Result<Matrix> {
    reference_attention_with(t_q, keys, values, AttentionOptions::unscaled())
}

pub fn reference_attention_with(
    t_q: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    opts: AttentionOptions,
) -> Result<Matrix> {
    if keys.rows() != values.rows() {
        return Err(Error::Shape(format!(
            "{} keys vs {} values",
            keys.rows(),
            values.rows()
        )));
    }
    let mut logits = t_q.matmul_transposed(keys)?;
    if let Some(scale) = opts.logit_scale(t_q.cols()) {
        logits = logits.scale(scale);
    }
    logits.softmax_rows().matmul(values)
}
