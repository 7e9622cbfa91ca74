//! Seeded synthetic KV tensors with the statistical structure that separates
//! the quantization axes: a few fixed high-magnitude key channels, and value
//! rows whose magnitude varies from token to token.
//!
//! These are stand-ins for real activations. The magnitudes are chosen to
//! make the effects visible, not to match any particular model.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use crate::numerics::Matrix;

/// Multiplier applied to the outlier key channels.
pub const OUTLIER_FACTOR: f32 = 50.0;

/// Three fixed channels, spread so that with 32-channel groups each one lands
/// in a different group.
pub fn default_outlier_channels(d: usize) -> Vec<usize> {
    let mut channels = vec![3 % d, (d / 3 + 1) % d, (2 * d / 3 + 2) % d];
    channels.dedup();
    channels
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f32) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f32 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Matrix::new(rows, cols, data).expect("finite samples")
}

/// Standard deviation of synthetic queries. Against unit-variance keys over
/// 128 channels this gives attention rows where roughly 90% of the weights
/// fall below 1e-3.
pub const QUERY_STD: f32 = 0.5;

/// Unit Gaussian keys where each channel in `channels` also carries a
/// persistent offset of `factor` times the normal channel scale, with
/// alternating sign. The outliers are fixed per channel and large in
/// magnitude, while token-to-token variation stays at the normal level.
pub fn outlier_keys<R: Rng + ?Sized>(
    rng: &mut R,
    tokens: usize,
    d: usize,
    channels: &[usize],
    factor: f32,
) -> Matrix {
    let mut keys = gaussian(rng, tokens, d, 1.0);
    for t in 0..tokens {
        for (i, &c) in channels.iter().enumerate() {
            let offset = if i % 2 == 0 { factor } else { -factor };
            let v = keys.get(t, c);
            keys.set(t, c, v + offset);
        }
    }
    keys
}

/// Gaussian value rows, each scaled by a log-normal per-token magnitude.
pub fn token_scaled_values<R: Rng + ?Sized>(
    rng: &mut R,
    tokens: usize,
    d: usize,
    log_std: f32,
) -> Matrix {
    let magnitude = LogNormal::new(0.0f32, log_std).expect("valid log-normal");
    let mut values = gaussian(rng, tokens, d, 1.0);
    for t in 0..tokens {
        let m = magnitude.sample(rng);
        values.row_mut(t).iter_mut().for_each(|v| *v *= m);
    }
    values
}

/// Softmax of Gaussian logits scaled by `temperature`: larger temperatures
/// give sparser rows.
pub fn sparse_attention<R: Rng + ?Sized>(
    rng: &mut R,
    queries: usize,
    tokens: usize,
    temperature: f32,
) -> Matrix {
    gaussian(rng, queries, tokens, temperature).softmax_rows()
}

/// Share of each row's mass held by its largest `fraction` of entries,
/// averaged over rows.
pub fn top_mass(a: &Matrix, fraction: f64) -> f64 {
    let k = ((a.cols() as f64 * fraction).floor() as usize).max(1);
    let mut total = 0.0;
    for row in a.iter_rows() {
        let mut sorted = row.to_vec();
        sorted.sort_by(|x, y| y.total_cmp(x));
        total += sorted[..k].iter().map(|&v| v as f64).sum::<f64>();
    }
    total / a.rows().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn outlier_channels_fall_in_distinct_groups() {
        let ch = default_outlier_channels(128);
        assert_eq!(ch, vec![3, 43, 87]);
        let groups: Vec<_> = ch.iter().map(|c| c / 32).collect();
        assert_eq!(groups, vec![0, 1, 2]);
    }

    #[test]
    fn generators_are_seeded() {
        let a = outlier_keys(&mut ChaCha8Rng::seed_from_u64(5), 8, 16, &[1], 50.0);
        let b = outlier_keys(&mut ChaCha8Rng::seed_from_u64(5), 8, 16, &[1], 50.0);
        assert_eq!(a, b);
        let col1: f32 = (0..8).map(|t| a.get(t, 1).abs()).sum();
        let col0: f32 = (0..8).map(|t| a.get(t, 0).abs()).sum();
        assert!(col1 > 10.0 * col0);
    }

    #[test]
    fn sparse_attention_concentrates_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = sparse_attention(&mut rng, 16, 256, 5.0);
        assert!(top_mass(&a, 0.1) >= 0.8);
    }
}
