//! Synthetic decode workload: seeded random projection layers driving one
//! cache per (layer, head) for every sequence in the batch.

use std::time::{Duration, Instant};

use kvquant::analysis::synthetic::gaussian;
use kvquant::attention::{decode_attention, AttentionOptions, DecodeInputs};
use kvquant::kvcache::KvCache;
use kvquant::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;

use crate::error::{BenchError, Result};
use crate::memory::{estimate_at, CacheMode, WorkloadSpec};

/// Query, key and value projections of one layer, entries drawn from
/// `N(0, 1/d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLayer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl SyntheticLayer {
    pub fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let std = 1.0 / (d as f32).sqrt();
        Self {
            w_q: gaussian(rng, d, d, std),
            w_k: gaussian(rng, d, d, std),
            w_v: gaussian(rng, d, d, std),
        }
    }
}

pub fn synthetic_layers(spec: &WorkloadSpec, seed: u64) -> Vec<SyntheticLayer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..spec.layers)
        .map(|_| SyntheticLayer::new(&mut rng, spec.hidden()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LengthDistribution {
    Fixed,
    /// Per-sequence lengths drawn log-normally with the workload's lengths as
    /// means.
    LogNormal {
        sigma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchOptions {
    pub mode: CacheMode,
    pub seed: u64,
    pub budget_bytes: Option<u64>,
    pub lengths: LengthDistribution,
}

impl BenchOptions {
    pub fn new(mode: CacheMode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            budget_bytes: None,
            lengths: LengthDistribution::Fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: CacheMode,
    pub batch: usize,
    pub decode_steps: usize,
    pub tokens_generated: usize,
    pub prefill_time: Duration,
    pub decode_time: Duration,
    /// Wall-clock time of each batched decode step.
    pub step_latencies: Vec<Duration>,
    pub counted_peak_bytes: u64,
    pub counted_final_bytes: u64,
    /// Closed-form bytes over the same schedule.
    pub estimated_peak_bytes: u64,
    pub estimated_final_bytes: u64,
    /// Last layer's attention output for every generated token, one
    /// `gen_len x d` matrix per sequence.
    pub outputs: Vec<Matrix>,
}

impl BenchReport {
    pub fn tokens_per_second(&self) -> f64 {
        self.tokens_generated as f64 / self.decode_time.as_secs_f64().max(f64::MIN_POSITIVE)
    }

    /// Nearest-rank percentile of step latency, `p` in (0, 100].
    pub fn latency_percentile(&self, p: f64) -> Duration {
        let mut sorted = self.step_latencies.clone();
        if sorted.is_empty() {
            return Duration::ZERO;
        }
        sorted.sort();
        let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
        sorted[rank.clamp(1, sorted.len()) - 1]
    }
}

struct Sequence {
    prompt_len: usize,
    gen_len: usize,
    done: usize,
    rng: ChaCha8Rng,
    caches: Vec<KvCache>,
    outputs: Vec<f32>,
}

impl Sequence {
    fn len(&self) -> usize {
        self.prompt_len + self.done
    }

    fn bytes(&self) -> u64 {
        self.caches.iter().map(KvCache::memory_bytes).sum()
    }

    fn prefill(
        &mut self,
        spec: &WorkloadSpec,
        layers: &[SyntheticLayer],
        mode: CacheMode,
    ) -> Result<()> {
        let cfg = mode.cache_config(spec.head_dim)?;
        let x = gaussian(&mut self.rng, self.prompt_len, spec.hidden(), 1.0);
        for layer in layers {
            let k = x.matmul(&layer.w_k)?;
            let v = x.matmul(&layer.w_v)?;
            for h in 0..spec.kv_heads {
                let cols = h * spec.head_dim..(h + 1) * spec.head_dim;
                self.caches.push(KvCache::prefill(
                    &k.slice_cols(cols.clone())?,
                    &v.slice_cols(cols)?,
                    cfg,
                )?);
            }
        }
        Ok(())
    }

    fn decode(&mut self, spec: &WorkloadSpec, layers: &[SyntheticLayer]) -> Result<()> {
        if self.done == self.gen_len {
            return Ok(());
        }
        let (d, hd) = (spec.hidden(), spec.head_dim);
        let mut t = gaussian(&mut self.rng, 1, d, 1.0);
        let mut t_o = vec![0.0f32; d];
        for (li, layer) in layers.iter().enumerate() {
            let q = t.matmul(&layer.w_q)?;
            let k = t.matmul(&layer.w_k)?;
            let v = t.matmul(&layer.w_v)?;
            for h in 0..spec.kv_heads {
                let cols = h * hd..(h + 1) * hd;
                let inputs = DecodeInputs::new(
                    q.slice_cols(cols.clone())?,
                    k.slice_cols(cols.clone())?,
                    v.slice_cols(cols.clone())?,
                )?;
                let out = decode_attention(
                    &inputs,
                    &mut self.caches[li * spec.kv_heads + h],
                    AttentionOptions::default(),
                )?;
                t_o[cols].copy_from_slice(out.as_slice());
            }
            let next: Vec<f32> = t.as_slice().iter().zip(&t_o).map(|(a, b)| a + b).collect();
            t = Matrix::new(1, d, next)?;
        }
        self.outputs.extend_from_slice(&t_o);
        self.done += 1;
        Ok(())
    }
}

fn sample_lengths(spec: &WorkloadSpec, opts: &BenchOptions) -> Vec<(usize, usize)> {
    match opts.lengths {
        LengthDistribution::Fixed => vec![(spec.prompt_len, spec.gen_len); spec.batch],
        LengthDistribution::LogNormal { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(u64::MAX);
            let with_mean = |mean: usize| {
                LogNormal::new((mean as f64).ln() - sigma * sigma / 2.0, sigma)
                    .expect("valid log-normal")
            };
            let (p, g) = (with_mean(spec.prompt_len), with_mean(spec.gen_len));
            (0..spec.batch)
                .map(|_| {
                    let draw = |dist: &LogNormal<f64>, rng: &mut ChaCha8Rng| {
                        (dist.sample(rng).round() as usize).max(1)
                    };
                    (draw(&p, &mut rng), draw(&g, &mut rng))
                })
                .collect()
        }
    }
}

/// Runs prefill and then decode steps for every sequence, in lock step
/// across the batch. Cache bytes are counted from the live caches after
/// prefill and after every step.
pub fn run_decode_benchmark(spec: &WorkloadSpec, opts: &BenchOptions) -> Result<BenchReport> {
    spec.validate()?;
    let layers = synthetic_layers(spec, opts.seed);
    let single = spec.with_batch(1);
    let mut seqs: Vec<Sequence> = sample_lengths(spec, opts)
        .into_iter()
        .enumerate()
        .map(|(i, (prompt_len, gen_len))| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64 + 1);
            Sequence {
                prompt_len,
                gen_len,
                done: 0,
                rng,
                caches: Vec::new(),
                outputs: Vec::new(),
            }
        })
        .collect();

    let mut counted_peak = 0u64;
    let mut estimated_peak = 0u64;
    let mut tally = |seqs: &[Sequence], step: String| -> Result<(u64, u64)> {
        let counted: u64 = seqs.iter().map(Sequence::bytes).sum();
        let mut estimated = 0u64;
        for s in seqs {
            let single = WorkloadSpec {
                prompt_len: s.prompt_len,
                gen_len: s.gen_len,
                ..single
            };
            estimated += estimate_at(&single, opts.mode, s.len())?.cache_bytes;
        }
        if let Some(budget) = opts.budget_bytes {
            if counted > budget {
                return Err(BenchError::Budget {
                    step,
                    needed: counted,
                    budget,
                });
            }
        }
        counted_peak = counted_peak.max(counted);
        estimated_peak = estimated_peak.max(estimated);
        Ok((counted, estimated))
    };

    let start = Instant::now();
    seqs.par_iter_mut()
        .try_for_each(|s| s.prefill(spec, &layers, opts.mode))?;
    let prefill_time = start.elapsed();
    let (mut counted_final, mut estimated_final) = tally(&seqs, "prefill".into())?;

    let steps = seqs.iter().map(|s| s.gen_len).max().unwrap_or(0);
    let mut step_latencies = Vec::with_capacity(steps);
    let decode_start = Instant::now();
    for step in 1..=steps {
        let t0 = Instant::now();
        seqs.par_iter_mut()
            .try_for_each(|s| s.decode(spec, &layers))?;
        step_latencies.push(t0.elapsed());
        (counted_final, estimated_final) = tally(&seqs, format!("decode step {step}"))?;
    }
    let decode_time = decode_start.elapsed();

    let d = spec.hidden();
    let tokens_generated = seqs.iter().map(|s| s.done).sum();
    let outputs = seqs
        .into_iter()
        .map(|s| Matrix::new(s.done, d, s.outputs))
        .collect::<kvquant::Result<Vec<_>>>()?;
    Ok(BenchReport {
        mode: opts.mode,
        batch: spec.batch,
        decode_steps: steps,
        tokens_generated,
        prefill_time,
        decode_time,
        step_latencies,
        counted_peak_bytes: counted_peak,
        counted_final_bytes: counted_final,
        estimated_peak_bytes: estimated_peak,
        estimated_final_bytes: estimated_final,
        outputs,
    })
}
