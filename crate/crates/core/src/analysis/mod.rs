//! Diagnostics for choosing quantization axes: relative reconstruction and
//! attention errors, attention sparsity, channel magnitude profiles, and the
//! 2x2 sweep over {per-token, per-channel} for keys and values.

pub mod synthetic;

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::quant::{fake_quantize, Axis, QuantParams};

/// Denominator clamp for elementwise relative errors.
pub const RATIO_EPS: f32 = 1e-6;
/// Attention weights below this count as negligible.
pub const DEFAULT_SPARSITY_THRESHOLD: f32 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMode {
    /// `|| (x - x_hat) / max(|x|, eps) ||_F`, elementwise ratio then norm.
    RatioNorm,
    /// `|| x - x_hat ||_F / || x ||_F`.
    NormRatio,
}

/// A relative error in both conventions.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RelativeError {
    pub ratio_norm: f64,
    pub norm_ratio: f64,
}

impl RelativeError {
    pub fn get(&self, mode: ErrorMode) -> f64 {
        match mode {
            ErrorMode::RatioNorm => self.ratio_norm,
            ErrorMode::NormRatio => self.norm_ratio,
        }
    }
}

pub fn relative_error(x: &Matrix, x_hat: &Matrix) -> Result<RelativeError> {
    x.check_same_shape(x_hat)?;
    let mut ratio_sq = 0.0f64;
    let mut diff_sq = 0.0f64;
    let mut base_sq = 0.0f64;
    for (&a, &b) in x.as_slice().iter().zip(x_hat.as_slice()) {
        let diff = a as f64 - b as f64;
        let denom = a.abs().max(RATIO_EPS) as f64;
        ratio_sq += (diff / denom).powi(2);
        diff_sq += diff * diff;
        base_sq += (a as f64) * (a as f64);
    }
    Ok(RelativeError {
        ratio_norm: ratio_sq.sqrt(),
        norm_ratio: diff_sq.sqrt() / base_sq.sqrt().max(RATIO_EPS as f64),
    })
}

/// Mean over rows of the per-row [`relative_error`].
pub fn mean_row_error(x: &Matrix, x_hat: &Matrix) -> Result<RelativeError> {
    x.check_same_shape(x_hat)?;
    let n = x.rows().max(1) as f64;
    let mut acc = RelativeError::default();
    for i in 0..x.rows() {
        let e = relative_error(&x.slice_rows(i..i + 1)?, &x_hat.slice_rows(i..i + 1)?)?;
        acc.ratio_norm += e.ratio_norm / n;
        acc.norm_ratio += e.norm_ratio / n;
    }
    Ok(acc)
}

pub fn relative_error_in(x: &Matrix, x_hat: &Matrix, mode: ErrorMode) -> Result<f64> {
    Ok(relative_error(x, x_hat)?.get(mode))
}

/// Relative error of the attention output `A V` when `V` is replaced by
/// `v_hat`.
pub fn value_output_error(a: &Matrix, v: &Matrix, v_hat: &Matrix) -> Result<RelativeError> {
    v.check_same_shape(v_hat)?;
    if a.cols() != v.rows() {
        return Err(Error::Shape(format!(
            "attention has {} columns but there are {} value tokens",
            a.cols(),
            v.rows()
        )));
    }
    relative_error(&a.matmul(v)?, &a.matmul(v_hat)?)
}

/// Fraction of entries strictly below `threshold`.
pub fn attention_sparsity(a: &Matrix, threshold: f32) -> f64 {
    let n = a.as_slice().len();
    if n == 0 {
        return 0.0;
    }
    a.as_slice().iter().filter(|&&w| w < threshold).count() as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProfile {
    /// Mean absolute value of each channel.
    pub magnitudes: Vec<f32>,
    /// The `k` largest channels, largest first; ties go to the lower index.
    pub top: Vec<usize>,
}

pub fn channel_profile(x: &Matrix, k: usize) -> ChannelProfile {
    let magnitudes = x.map(f32::abs).column_means();
    let mut order: Vec<usize> = (0..magnitudes.len()).collect();
    order.sort_by(|&a, &b| magnitudes[b].total_cmp(&magnitudes[a]).then(a.cmp(&b)));
    order.truncate(k);
    ChannelProfile {
        magnitudes,
        top: order,
    }
}

/// Errors for one (key axis, value axis, bits) configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub key_axis: Axis,
    pub value_axis: Axis,
    pub bits: u8,
    pub key_recon: RelativeError,
    pub attn_score: RelativeError,
    pub value_recon: RelativeError,
    /// Error of `A V` under value quantization, with exact `A`.
    pub value_output: RelativeError,
    pub attention_sparsity: f64,
}

impl ErrorReport {
    /// Sum of the attention-score and value-output errors.
    pub fn combined_error(&self, mode: ErrorMode) -> f64 {
        self.attn_score.get(mode) + self.value_output.get(mode)
    }

    /// Row label in the style `2bit (K - C, V - T)`.
    pub fn label(&self) -> String {
        format!(
            "{}bit (K - {}, V - {})",
            self.bits,
            self.key_axis.label(),
            self.value_axis.label()
        )
    }

    pub fn is_config(&self, key_axis: Axis, value_axis: Axis) -> bool {
        self.key_axis == key_axis && self.value_axis == value_axis
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: key {:.4}, attn {:.4}, value {:.4}, delta {:.4} (norm ratio)",
            self.label(),
            self.key_recon.norm_ratio,
            self.attn_score.norm_ratio,
            self.value_recon.norm_ratio,
            self.value_output.norm_ratio
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub bits: u8,
    pub group_size: usize,
    pub sparsity_threshold: f32,
    /// Error convention used to order the reports.
    pub rank_by: ErrorMode,
}

impl SweepOptions {
    pub fn new(bits: u8, group_size: usize) -> Self {
        Self {
            bits,
            group_size,
            sparsity_threshold: DEFAULT_SPARSITY_THRESHOLD,
            rank_by: ErrorMode::NormRatio,
        }
    }
}

/// Fake-quantizes keys and values along every combination of axes.
///
/// Each row of `queries` is one decode-step query, with
/// `A = softmax(t_Q K^T)` and no logit scaling. Attention-score and
/// value-output errors are computed per query row and averaged; the
/// reconstruction errors cover the whole matrices. Reports are sorted by
/// value output error, ties broken by attention-score error, so the best
/// configuration comes first.
pub fn quadrant_sweep(
    keys: &Matrix,
    values: &Matrix,
    queries: &Matrix,
    opts: SweepOptions,
) -> Result<Vec<ErrorReport>> {
    if keys.rows() != values.rows() {
        return Err(Error::Shape(format!(
            "{} key tokens vs {} value tokens",
            keys.rows(),
            values.rows()
        )));
    }
    if queries.cols() != keys.cols() {
        return Err(Error::Shape(format!(
            "queries have {} channels, keys have {}",
            queries.cols(),
            keys.cols()
        )));
    }
    let attn = queries.matmul_transposed(keys)?.softmax_rows();
    let sparsity = attention_sparsity(&attn, opts.sparsity_threshold);

    let axes = [Axis::PerToken, Axis::PerChannel];
    let quantized = |m: &Matrix, axis| -> Result<Matrix> {
        Ok(fake_quantize(
            m,
            QuantParams::new(opts.bits, opts.group_size, axis)?,
        ))
    };
    let mut key_side = Vec::new();
    for axis in axes {
        let k_hat = quantized(keys, axis)?;
        let attn_hat = queries.matmul_transposed(&k_hat)?.softmax_rows();
        key_side.push((
            axis,
            relative_error(keys, &k_hat)?,
            mean_row_error(&attn, &attn_hat)?,
        ));
    }
    let exact_out = attn.matmul(values)?;
    let mut value_side = Vec::new();
    for axis in axes {
        let v_hat = quantized(values, axis)?;
        let delta = mean_row_error(&exact_out, &attn.matmul(&v_hat)?)?;
        value_side.push((axis, relative_error(values, &v_hat)?, delta));
    }

    let mut reports = Vec::with_capacity(4);
    for &(key_axis, key_recon, attn_score) in &key_side {
        for &(value_axis, value_recon, value_output) in &value_side {
            reports.push(ErrorReport {
                key_axis,
                value_axis,
                bits: opts.bits,
                key_recon,
                attn_score,
                value_recon,
                value_output,
                attention_sparsity: sparsity,
            });
        }
    }
    let mode = opts.rank_by;
    reports.sort_by(|a, b| {
        a.value_output
            .get(mode)
            .total_cmp(&b.value_output.get(mode))
            .then(a.attn_score.get(mode).total_cmp(&b.attn_score.get(mode)))
    });
    Ok(reports)
}

/// Element-wise mean of per-head reports for each configuration, in the
/// order of `per_head[0]`.
pub fn average_reports(per_head: &[Vec<ErrorReport>]) -> Vec<ErrorReport> {
    let Some(first) = per_head.first() else {
        return Vec::new();
    };
    let n = per_head.len() as f64;
    let mean = |f: &dyn Fn(&ErrorReport) -> RelativeError, key, value| {
        let mut acc = RelativeError::default();
        for reports in per_head {
            let r = reports
                .iter()
                .find(|r| r.is_config(key, value))
                .expect("every sweep has all four");
            acc.ratio_norm += f(r).ratio_norm / n;
            acc.norm_ratio += f(r).norm_ratio / n;
        }
        acc
    };
    first
        .iter()
        .map(|r| {
            let (k, v) = (r.key_axis, r.value_axis);
            let sparsity = per_head
                .iter()
                .map(|h| h[0].attention_sparsity)
                .sum::<f64>()
                / n;
            ErrorReport {
                key_axis: k,
                value_axis: v,
                bits: r.bits,
                key_recon: mean(&|r| r.key_recon, k, v),
                attn_score: mean(&|r| r.attn_score, k, v),
                value_recon: mean(&|r| r.value_recon, k, v),
                value_output: mean(&|r| r.value_output, k, v),
                attention_sparsity: sparsity,
            }
        })
        .collect()
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
                .map(|_| rng.gen_range(0.5f32..2.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn relative_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 4, 6);
        assert_eq!(relative_error(&x, &x).unwrap(), RelativeError::default());

        let scaled = x.map(|v| (v as f64 * 1.1) as f32);
        let e = relative_error(&x, &scaled).unwrap();
        assert!((e.ratio_norm - 0.1 * (24f64).sqrt()).abs() < 1e-5);
        assert!((e.norm_ratio - 0.1).abs() < 1e-6);

        let with_zero = Matrix::row_vector(vec![0.0, 1.0]).unwrap();
        let off = Matrix::row_vector(vec![1e-3, 1.0]).unwrap();
        let e = relative_error(&with_zero, &off).unwrap();
        assert!(e.ratio_norm.is_finite() && e.ratio_norm > 0.0);
        assert!(relative_error(&x, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 3, 3);
        let mut y = x.clone();
        y.set(1, 2, y.get(1, 2) + 1e-4);
        let e = relative_error(&x, &y).unwrap();
        assert!(e.ratio_norm > 0.0 && e.norm_ratio > 0.0);
    }

    #[test]
    fn value_output_error_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random(&mut rng, 10, 8);
        assert_eq!(
            value_output_error(&Matrix::identity(10), &v, &v).unwrap(),
            RelativeError::default()
        );

        let mut v_hat = v.map(|x| x * 0.9);
        let j = 4;
        let mut one_hot = Matrix::zeros(1, 10);
        one_hot.set(0, j, 1.0);
        let delta = value_output_error(&one_hot, &v, &v_hat).unwrap();
        let local = relative_error(
            &v.slice_rows(j..j + 1).unwrap(),
            &v_hat.slice_rows(j..j + 1).unwrap(),
        )
        .unwrap();
        assert_eq!(delta, local);
        // Changing any other row leaves the error untouched.
        v_hat.set(0, 0, 100.0);
        assert_eq!(value_output_error(&one_hot, &v, &v_hat).unwrap(), local);
        assert!(value_output_error(&Matrix::zeros(1, 9), &v, &v).is_err());
    }

    #[test]
    fn sparsity_examples() {
        assert!((attention_sparsity(&Matrix::identity(100), 1e-3) - 0.99).abs() < 1e-12);
        let uniform = Matrix::new(3, 50, vec![1.0 / 50.0; 150]).unwrap();
        assert_eq!(attention_sparsity(&uniform, 0.01), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = synthetic::sparse_attention(&mut rng, 7, 64, 3.0);
        let mut count = 0;
        for i in 0..7 {
            for j in 0..64 {
                if a.get(i, j) < 1e-3 {
                    count += 1;
                }
            }
        }
        assert_eq!(attention_sparsity(&a, 1e-3), count as f64 / (7.0 * 64.0));
    }

    #[test]
    fn channel_profile_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = Matrix::zeros(20, 6);
        for t in 0..20 {
            let sign = if rng.gen() { 1.0 } else { -1.0 };
            x.set(t, 0, 100.0 * sign);
            for c in 1..6 {
                x.set(t, c, if rng.gen() { 1.0 } else { -1.0 });
            }
        }
        let p = channel_profile(&x, 1);
        assert_eq!(p.top, vec![0]);
        assert!((p.magnitudes[0] - 100.0).abs() < 1e-4);
        assert_eq!(p.magnitudes.len(), 6);

        let flat = channel_profile(
            &Matrix::new(2, 3, vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).unwrap(),
            3,
        );
        assert_eq!(flat.magnitudes, vec![1.0; 3]);
        assert_eq!(flat.top, vec![0, 1, 2]);

        let y = random(&mut rng, 9, 5);
        let p = channel_profile(&y, 5);
        for c in 0..5 {
            let brute: f64 = (0..9).map(|t| y.get(t, c).abs() as f64).sum::<f64>() / 9.0;
            assert!((p.magnitudes[c] as f64 - brute).abs() < 1e-6);
        }
    }

    #[test]
    fn eight_bit_sweep_is_near_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let keys = synthetic::gaussian(&mut rng, 128, 64, 1.0);
        let values = synthetic::gaussian(&mut rng, 128, 64, 1.0);
        let queries = synthetic::gaussian(&mut rng, 8, 64, 0.25);
        let reports = quadrant_sweep(&keys, &values, &queries, SweepOptions::new(8, 32)).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert!(r.key_recon.norm_ratio < 1e-2, "{r}");
            assert!(r.attn_score.norm_ratio < 1e-2, "{r}");
            assert!(r.value_recon.norm_ratio < 1e-2, "{r}");
            assert!(r.value_output.norm_ratio < 1e-2, "{r}");
        }
    }

    #[test]
    fn isotropic_keys_do_not_prefer_an_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let keys = synthetic::gaussian(&mut rng, 256, 128, 1.0);
        let values = synthetic::gaussian(&mut rng, 256, 128, 1.0);
        let queries = synthetic::gaussian(&mut rng, 8, 128, 0.3);
        let reports = quadrant_sweep(&keys, &values, &queries, SweepOptions::new(2, 32)).unwrap();
        let key_err = |axis| {
            reports
                .iter()
                .find(|r| r.key_axis == axis)
                .unwrap()
                .key_recon
                .norm_ratio
        };
        let (t, c) = (key_err(Axis::PerToken), key_err(Axis::PerChannel));
        assert!(t < 2.0 * c && c < 2.0 * t, "{t} vs {c}");
    }

    #[test]
    fn outlier_keys_favor_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let channels = synthetic::default_outlier_channels(128);
        let keys =
            synthetic::outlier_keys(&mut rng, 256, 128, &channels, synthetic::OUTLIER_FACTOR);
        let values = synthetic::token_scaled_values(&mut rng, 256, 128, 1.0);
        let queries = synthetic::gaussian(&mut rng, 16, 128, synthetic::QUERY_STD);
        let reports = quadrant_sweep(&keys, &values, &queries, SweepOptions::new(2, 32)).unwrap();
        let best = &reports[0];
        assert!(
            best.is_config(Axis::PerChannel, Axis::PerToken),
            "{reports:#?}"
        );
        assert_eq!(best.label(), "2bit (K - C, V - T)");
    }

    #[test]
    fn mean_row_error_matches_single_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 1, 7);
        let y = random(&mut rng, 1, 7);
        assert_eq!(
            mean_row_error(&x, &y).unwrap(),
            relative_error(&x, &y).unwrap()
        );
        let xx = x.vstack(&x).unwrap();
        let yy = y.vstack(&x).unwrap();
        let half = mean_row_error(&xx, &yy).unwrap();
        assert!((half.norm_ratio - relative_error(&x, &y).unwrap().norm_ratio / 2.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_shape_errors() {
        let k = Matrix::zeros(4, 8);
        assert!(quadrant_sweep(
            &k,
            &Matrix::zeros(3, 8),
            &Matrix::zeros(1, 8),
            SweepOptions::new(2, 4)
        )
        .is_err());
        assert!(quadrant_sweep(&k, &k, &Matrix::zeros(1, 4), SweepOptions::new(2, 4)).is_err());
    }
}
