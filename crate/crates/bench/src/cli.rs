//! Command-line front end. Every command builds a [`Report`] and prints it.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use kvquant::analysis::synthetic::{
    default_outlier_channels, gaussian, outlier_keys, token_scaled_values, OUTLIER_FACTOR,
    QUERY_STD,
};
use kvquant::analysis::{
    average_reports, channel_profile, quadrant_sweep, ErrorMode, ErrorReport, SweepOptions,
};
use kvquant::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dump::{decode, encode, read_dump, DumpTensor};
use crate::error::{BenchError, Result};
use crate::memory::{
    estimate_memory, estimate_peak_memory, max_batch_at_budget, CacheMode, MemoryEstimate,
    WorkloadSpec,
};
use crate::report::{Report, Table};
use crate::workload::{run_decode_benchmark, BenchOptions, BenchReport, LengthDistribution};

#[derive(Debug, Parser)]
#[command(
    name = "kvquant",
    version,
    about = "Quantized KV cache: memory estimates, decode benchmarks and error analysis",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form KV cache memory for a workload.
    Estimate {
        #[command(flatten)]
        shape: ShapeArgs,
        #[command(flatten)]
        cache: CacheArgs,
        /// Also report the largest batch that fits in this many bytes.
        #[arg(long)]
        budget_bytes: Option<u64>,
        /// Model weight bytes to add to the totals.
        #[arg(long, default_value_t = 0)]
        weight_bytes: u64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Run the synthetic decode workload and report throughput.
    Bench {
        #[command(flatten)]
        shape: ShapeArgs,
        #[command(flatten)]
        cache: CacheArgs,
        #[arg(long, value_enum, default_value_t = BenchMode::Both)]
        mode: BenchMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Abort when counted cache bytes exceed this.
        #[arg(long)]
        budget_bytes: Option<u64>,
        #[arg(long, value_enum, default_value_t = Lengths::Fixed)]
        length_distribution: Lengths,
        /// Log-space standard deviation for `--length-distribution lognormal`.
        #[arg(long, default_value_t = 0.5)]
        length_sigma: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Quantization error and channel profiles of dumped keys and values.
    Analyze {
        /// Key dump, `[heads, tokens, dim]` or `[tokens, dim]`.
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        values: PathBuf,
        /// Query dump; random queries are used when absent.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        num_queries: usize,
        #[arg(long, default_value_t = 8)]
        top: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cache: CacheArgs,
        #[arg(long, value_enum, default_value_t = Mode::NormRatio)]
        error_mode: Mode,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Per-token vs per-channel sweep for keys and values on synthetic data.
    Sweep {
        #[command(flatten)]
        cache: CacheArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        tokens: usize,
        #[arg(long, default_value_t = 128)]
        head_dim: usize,
        #[arg(long, default_value_t = 16)]
        num_queries: usize,
        /// Independent draws averaged into the table.
        #[arg(long, default_value_t = 1)]
        trials: usize,
        /// Give three key channels large fixed offsets.
        #[arg(long)]
        synthetic_outliers: bool,
        /// Log-space spread of per-token value magnitudes.
        #[arg(long, default_value_t = 1.0)]
        value_log_std: f32,
        #[arg(long, value_enum, default_value_t = Mode::NormRatio)]
        error_mode: Mode,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Write a random tensor dump, read it back and compare.
    DumpRoundtrip {
        /// Comma-separated dims.
        #[arg(long, default_value = "4,64,128")]
        shape: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the dump; defaults to the system temp dir.
        #[arg(long)]
        path: Option<PathBuf>,
        /// Re-encode an existing dump instead of a random one.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Debug, Args)]
struct ShapeArgs {
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    prompt_len: Option<usize>,
    #[arg(long)]
    gen_len: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
}

impl ShapeArgs {
    fn resolve(&self, default: Preset) -> (Preset, WorkloadSpec) {
        let preset = self.preset.unwrap_or(default);
        let base = preset.spec();
        let spec = WorkloadSpec {
            batch: self.batch.unwrap_or(base.batch),
            prompt_len: self.prompt_len.unwrap_or(base.prompt_len),
            gen_len: self.gen_len.unwrap_or(base.gen_len),
            layers: self.layers.unwrap_or(base.layers),
            kv_heads: self.kv_heads.unwrap_or(base.kv_heads),
            head_dim: self.head_dim.unwrap_or(base.head_dim),
        };
        (preset, spec)
    }
}

#[derive(Debug, Args)]
struct CacheArgs {
    #[arg(long, default_value_t = 2, value_parser = PossibleValuesParser::new(["2", "4", "8"]).map(|s| s.parse::<u8>().unwrap()))]
    bits: u8,
    #[arg(long, default_value_t = 32)]
    group_size: usize,
    #[arg(long, default_value_t = 128)]
    residual: usize,
}

impl CacheArgs {
    fn mode(&self) -> CacheMode {
        CacheMode::Kivi {
            bits: self.bits,
            group_size: self.group_size,
            residual: self.residual,
        }
    }
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append an aligned table.
    #[arg(long)]
    table: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Opt175b,
    #[value(name = "llama2-7b")]
    Llama2_7b,
    Sharegpt,
}

impl Preset {
    fn spec(self) -> WorkloadSpec {
        match self {
            Preset::Opt175b => WorkloadSpec::opt175b(),
            Preset::Llama2_7b => WorkloadSpec::llama2_7b(),
            Preset::Sharegpt => WorkloadSpec::sharegpt(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Opt175b => "opt175b",
            Preset::Llama2_7b => "llama2-7b",
            Preset::Sharegpt => "sharegpt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchMode {
    Fp,
    Kivi,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Lengths {
    Fixed,
    Lognormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    NormRatio,
    RatioNorm,
}

impl From<Mode> for ErrorMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::NormRatio => ErrorMode::NormRatio,
            Mode::RatioNorm => ErrorMode::RatioNorm,
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code: 0 on success, 2 on usage errors, 1 on
/// runtime errors.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    let (result, output) = execute(cli.command);
    match result.and_then(|report| emit(&report, output, out)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn emit(report: &Report, output: OutputArgs, out: &mut dyn Write) -> Result<()> {
    let text = report.render();
    out.write_all(text.as_bytes())?;
    if let Some(path) = output.out {
        fs::write(path, &text)?;
    }
    Ok(())
}

fn execute(command: Command) -> (Result<Report>, OutputArgs) {
    match command {
        Command::Estimate {
            shape,
            cache,
            budget_bytes,
            weight_bytes,
            output,
        } => (
            estimate(&shape, &cache, budget_bytes, weight_bytes, output.table),
            output,
        ),
        Command::Bench {
            shape,
            cache,
            mode,
            seed,
            budget_bytes,
            length_distribution,
            length_sigma,
            output,
        } => {
            let lengths = match length_distribution {
                Lengths::Fixed => LengthDistribution::Fixed,
                Lengths::Lognormal => LengthDistribution::LogNormal {
                    sigma: length_sigma,
                },
            };
            (
                bench(
                    &shape,
                    &cache,
                    mode,
                    seed,
                    budget_bytes,
                    lengths,
                    output.table,
                ),
                output,
            )
        }
        Command::Analyze {
            keys,
            values,
            queries,
            num_queries,
            top,
            seed,
            cache,
            error_mode,
            output,
        } => {
            let opts = sweep_options(&cache, error_mode);
            (
                analyze(
                    &keys,
                    &values,
                    queries.as_ref(),
                    num_queries,
                    top,
                    seed,
                    opts,
                    output.table,
                ),
                output,
            )
        }
        Command::Sweep {
            cache,
            seed,
            tokens,
            head_dim,
            num_queries,
            trials,
            synthetic_outliers,
            value_log_std,
            error_mode,
            output,
        } => {
            let opts = sweep_options(&cache, error_mode);
            let data = SweepData {
                tokens,
                head_dim,
                num_queries,
                trials,
                synthetic_outliers,
                value_log_std,
            };
            (sweep(&data, seed, opts, output.table), output)
        }
        Command::DumpRoundtrip {
            shape,
            seed,
            path,
            input,
            output,
        } => (dump_roundtrip(&shape, seed, path, input), output),
    }
}

fn sweep_options(cache: &CacheArgs, mode: Mode) -> SweepOptions {
    SweepOptions {
        rank_by: mode.into(),
        ..SweepOptions::new(cache.bits, cache.group_size)
    }
}

fn human_bytes(bytes: u64) -> String {
    let b = bytes as f64;
    format!(
        "{:.2} TB ({:.2} TiB, {:.2} GiB)",
        b / 1e12,
        b / (1u64 << 40) as f64,
        b / (1u64 << 30) as f64
    )
}

fn shape_entries(report: &mut Report, preset: Preset, spec: &WorkloadSpec) {
    report
        .entry("preset", preset.name())
        .entry("batch", spec.batch)
        .entry("prompt_len", spec.prompt_len)
        .entry("gen_len", spec.gen_len)
        .entry("layers", spec.layers)
        .entry("kv_heads", spec.kv_heads)
        .entry("head_dim", spec.head_dim)
        .entry("hidden", spec.hidden());
}

fn estimate(
    shape: &ShapeArgs,
    cache: &CacheArgs,
    budget: Option<u64>,
    weight_bytes: u64,
    table: bool,
) -> Result<Report> {
    let (preset, spec) = shape.resolve(Preset::Llama2_7b);
    let mode = cache.mode();
    let fp = estimate_memory(&spec, CacheMode::Fp16)?;
    let kivi = estimate_memory(&spec, mode)?;
    let fp_peak = estimate_peak_memory(&spec, CacheMode::Fp16)?;
    let kivi_peak = estimate_peak_memory(&spec, mode)?;

    let mut r = Report::new();
    r.comment("kv cache memory, end of generation");
    shape_entries(&mut r, preset, &spec);
    r.entry("tokens", kivi.tokens)
        .entry("mode", mode)
        .entry("fp16_bytes", fp.cache_bytes)
        .entry("fp16_human", human_bytes(fp.cache_bytes))
        .entry("kivi_bytes", kivi.cache_bytes)
        .entry("kivi_human", human_bytes(kivi.cache_bytes))
        .entry("kivi_codes_bytes", kivi.breakdown.codes)
        .entry("kivi_scales_zeros_bytes", kivi.breakdown.scales_zeros)
        .entry("kivi_residual_bytes", kivi.breakdown.residual)
        .entry(
            "compression_ratio",
            format!("{:.4}", kivi.compression_ratio()),
        );
    r.comment("largest footprint over prefill and decode");
    r.entry("fp16_peak_bytes", fp_peak.cache_bytes)
        .entry("kivi_peak_bytes", kivi_peak.cache_bytes)
        .entry("kivi_peak_tokens", kivi_peak.tokens);
    if weight_bytes > 0 {
        r.comment("including model weights");
        r.entry("weight_bytes", weight_bytes)
            .entry(
                "fp16_total_bytes",
                fp.cache_bytes.saturating_add(weight_bytes),
            )
            .entry(
                "kivi_total_bytes",
                kivi.cache_bytes.saturating_add(weight_bytes),
            );
    }
    if let Some(budget) = budget {
        let fp_b = max_batch_at_budget(&spec, budget, CacheMode::Fp16)?;
        let kivi_b = max_batch_at_budget(&spec, budget, mode)?;
        r.comment("batch capacity at a fixed byte budget");
        r.entry("budget_bytes", budget)
            .entry("max_batch_fp16", fp_b)
            .entry("max_batch_kivi", kivi_b)
            .entry("batch_gain", format!("{:.3}", kivi_b as f64 / fp_b as f64));
    }
    if table {
        let mut t = Table::new(&["mode", "bytes", "peak bytes", "ratio"]);
        let mut row = |name: String, e: &MemoryEstimate, peak: &MemoryEstimate| {
            t.row(vec![
                name,
                e.cache_bytes.to_string(),
                peak.cache_bytes.to_string(),
                format!("{:.3}", e.compression_ratio()),
            ]);
        };
        row("fp16".into(), &fp, &fp_peak);
        row(mode.label(), &kivi, &kivi_peak);
        r.set_table(t);
    }
    Ok(r)
}

fn bench(
    shape: &ShapeArgs,
    cache: &CacheArgs,
    which: BenchMode,
    seed: u64,
    budget_bytes: Option<u64>,
    lengths: LengthDistribution,
    table: bool,
) -> Result<Report> {
    let (preset, spec) = shape.resolve(Preset::Sharegpt);
    let modes = match which {
        BenchMode::Fp => vec![CacheMode::Fp16],
        BenchMode::Kivi => vec![cache.mode()],
        BenchMode::Both => vec![CacheMode::Fp16, cache.mode()],
    };
    let mut r = Report::new();
    r.comment("synthetic decode benchmark");
    shape_entries(&mut r, preset, &spec);
    r.entry("seed", seed);
    let mut t = Table::new(&["mode", "tokens/s", "p50 ms", "p99 ms", "peak bytes"]);
    for mode in modes {
        let opts = BenchOptions {
            mode,
            seed,
            budget_bytes,
            lengths,
        };
        let b = run_decode_benchmark(&spec, &opts)?;
        bench_entries(&mut r, &b);
        t.row(vec![
            mode.label(),
            format!("{:.1}", b.tokens_per_second()),
            format!("{:.3}", ms(&b, 50.0)),
            format!("{:.3}", ms(&b, 99.0)),
            b.counted_peak_bytes.to_string(),
        ]);
    }
    if table {
        r.set_table(t);
    }
    Ok(r)
}

fn ms(b: &BenchReport, p: f64) -> f64 {
    b.latency_percentile(p).as_secs_f64() * 1e3
}

fn bench_entries(r: &mut Report, b: &BenchReport) {
    let m = b.mode.label();
    r.comment(format!("{}", b.mode));
    r.entry(format!("{m}.decode_steps"), b.decode_steps)
        .entry(format!("{m}.tokens_generated"), b.tokens_generated)
        .entry(
            format!("{m}.prefill_seconds"),
            format!("{:.4}", b.prefill_time.as_secs_f64()),
        )
        .entry(
            format!("{m}.decode_seconds"),
            format!("{:.4}", b.decode_time.as_secs_f64()),
        )
        .entry(
            format!("{m}.tokens_per_second"),
            format!("{:.2}", b.tokens_per_second()),
        )
        .entry(format!("{m}.latency_p50_ms"), format!("{:.4}", ms(b, 50.0)))
        .entry(format!("{m}.latency_p90_ms"), format!("{:.4}", ms(b, 90.0)))
        .entry(format!("{m}.latency_p99_ms"), format!("{:.4}", ms(b, 99.0)))
        .entry(format!("{m}.counted_peak_bytes"), b.counted_peak_bytes)
        .entry(format!("{m}.estimated_peak_bytes"), b.estimated_peak_bytes)
        .entry(format!("{m}.counted_final_bytes"), b.counted_final_bytes)
        .entry(
            format!("{m}.estimated_final_bytes"),
            b.estimated_final_bytes,
        );
}

fn sweep_entries(r: &mut Report, reports: &[ErrorReport], mode: ErrorMode, table: bool) {
    let mode_name = match mode {
        ErrorMode::NormRatio => "norm_ratio",
        ErrorMode::RatioNorm => "ratio_norm",
    };
    r.entry("error_mode", mode_name);
    if let Some(first) = reports.first() {
        r.entry(
            "attention_sparsity",
            format!("{:.4}", first.attention_sparsity),
        );
        r.entry("best", first.label());
    }
    let mut t = Table::new(&[
        "config",
        "key err",
        "attn score err",
        "value err",
        "value output err",
    ]);
    for (i, rep) in reports.iter().enumerate() {
        let n = i + 1;
        r.entry(format!("rank{n}"), rep.label())
            .entry(
                format!("rank{n}.key_error"),
                format!("{:.6}", rep.key_recon.get(mode)),
            )
            .entry(
                format!("rank{n}.attn_score_error"),
                format!("{:.6}", rep.attn_score.get(mode)),
            )
            .entry(
                format!("rank{n}.value_error"),
                format!("{:.6}", rep.value_recon.get(mode)),
            )
            .entry(
                format!("rank{n}.value_output_error"),
                format!("{:.6}", rep.value_output.get(mode)),
            );
        t.row(vec![
            rep.label(),
            format!("{:.4}", rep.key_recon.get(mode)),
            format!("{:.4}", rep.attn_score.get(mode)),
            format!("{:.4}", rep.value_recon.get(mode)),
            format!("{:.4}", rep.value_output.get(mode)),
        ]);
    }
    if table {
        r.set_table(t);
    }
}

/// Sorts averaged reports the same way a single sweep does.
fn rank(mut reports: Vec<ErrorReport>, mode: ErrorMode) -> Vec<ErrorReport> {
    reports.sort_by(|a, b| {
        a.value_output
            .get(mode)
            .total_cmp(&b.value_output.get(mode))
            .then(a.attn_score.get(mode).total_cmp(&b.attn_score.get(mode)))
    });
    reports
}

#[allow(clippy::too_many_arguments)]
fn analyze(
    keys: &PathBuf,
    values: &PathBuf,
    queries: Option<&PathBuf>,
    num_queries: usize,
    top: usize,
    seed: u64,
    opts: SweepOptions,
    table: bool,
) -> Result<Report> {
    let keys = read_dump(keys)?;
    let values = read_dump(values)?;
    if keys.len() != values.len() {
        return Err(kvquant::Error::Shape(format!(
            "{} key heads vs {} value heads",
            keys.len(),
            values.len()
        ))
        .into());
    }
    let queries = match queries {
        Some(path) => read_dump(path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            keys.iter()
                .map(|k| gaussian(&mut rng, num_queries, k.cols(), QUERY_STD))
                .collect()
        }
    };
    if queries.len() != keys.len() {
        return Err(kvquant::Error::Shape(format!(
            "{} query heads vs {} key heads",
            queries.len(),
            keys.len()
        ))
        .into());
    }
    let per_head = keys
        .iter()
        .zip(&values)
        .zip(&queries)
        .map(|((k, v), q)| quadrant_sweep(k, v, q, opts))
        .collect::<kvquant::Result<Vec<_>>>()?;

    let mut r = Report::new();
    r.comment("quantization error of dumped keys and values");
    r.entry("heads", keys.len())
        .entry("tokens", keys[0].rows())
        .entry("head_dim", keys[0].cols());
    r.entry("bits", opts.bits)
        .entry("group_size", opts.group_size);
    sweep_entries(
        &mut r,
        &rank(average_reports(&per_head), opts.rank_by),
        opts.rank_by,
        table,
    );
    r.comment("largest mean-magnitude channels per head");
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    for (h, (k, v)) in keys.iter().zip(&values).enumerate() {
        r.entry(
            format!("head{h}.key_top_channels"),
            join(&channel_profile(k, top).top),
        );
        r.entry(
            format!("head{h}.value_top_channels"),
            join(&channel_profile(v, top).top),
        );
    }
    Ok(r)
}

struct SweepData {
    tokens: usize,
    head_dim: usize,
    num_queries: usize,
    trials: usize,
    synthetic_outliers: bool,
    value_log_std: f32,
}

fn sweep(data: &SweepData, seed: u64, opts: SweepOptions, table: bool) -> Result<Report> {
    if data.trials == 0 || data.tokens == 0 || data.head_dim == 0 || data.num_queries == 0 {
        return Err(BenchError::Workload(
            "tokens, head dim, queries and trials must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = default_outlier_channels(data.head_dim);
    let mut per_trial = Vec::with_capacity(data.trials);
    for _ in 0..data.trials {
        let keys = if data.synthetic_outliers {
            outlier_keys(
                &mut rng,
                data.tokens,
                data.head_dim,
                &channels,
                OUTLIER_FACTOR,
            )
        } else {
            gaussian(&mut rng, data.tokens, data.head_dim, 1.0)
        };
        let values = token_scaled_values(&mut rng, data.tokens, data.head_dim, data.value_log_std);
        let queries = gaussian(&mut rng, data.num_queries, data.head_dim, QUERY_STD);
        per_trial.push(quadrant_sweep(&keys, &values, &queries, opts)?);
    }
    let mut r = Report::new();
    r.comment(format!(
        "{}-bit quadrant sweep on synthetic data",
        opts.bits
    ));
    r.entry("bits", opts.bits)
        .entry("group_size", opts.group_size)
        .entry("tokens", data.tokens)
        .entry("head_dim", data.head_dim)
        .entry("queries", data.num_queries)
        .entry("trials", data.trials)
        .entry("seed", seed)
        .entry("synthetic_outliers", data.synthetic_outliers);
    if data.synthetic_outliers {
        let list = channels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        r.entry("outlier_channels", list);
    }
    sweep_entries(
        &mut r,
        &rank(average_reports(&per_trial), opts.rank_by),
        opts.rank_by,
        table,
    );
    Ok(r)
}

fn parse_shape(shape: &str) -> Result<Vec<u64>> {
    if shape.trim().is_empty() {
        return Ok(Vec::new());
    }
    shape
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| BenchError::Workload(format!("bad dimension {s:?} in --shape")))
        })
        .collect()
}

fn dump_roundtrip(
    shape: &str,
    seed: u64,
    path: Option<PathBuf>,
    input: Option<PathBuf>,
) -> Result<Report> {
    let original = match &input {
        Some(p) => fs::read(p)?,
        None => {
            let dims = parse_shape(shape)?;
            let n = dims
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or(BenchError::Overflow)?;
            if dims.len() > u8::MAX as usize || n > 1 << 28 {
                return Err(BenchError::Workload(format!("shape {shape} is too large")));
            }
            let m = gaussian(&mut ChaCha8Rng::seed_from_u64(seed), 1, n as usize, 1.0);
            encode(&DumpTensor {
                dims,
                data: m.into_vec(),
            })
        }
    };
    let tensor = decode(&original)?;
    let path = path.unwrap_or_else(|| {
        std::env::temp_dir().join(format!("kvquant-roundtrip-{}.kvqd", std::process::id()))
    });
    fs::write(&path, encode(&tensor))?;
    let reread = fs::read(&path)?;
    let matrices: Vec<Matrix> = decode(&reread)?.into_matrices();
    let identical = reread == original && decode(&reread)? == tensor;
    if !identical {
        return Err(BenchError::Workload(format!(
            "round trip through {} changed the tensor",
            path.display()
        )));
    }
    let dims = tensor
        .dims
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let mut r = Report::new();
    r.comment("dump round trip");
    r.entry("path", path.display())
        .entry("dims", dims)
        .entry("elements", tensor.data.len())
        .entry("bytes", reread.len())
        .entry("matrices", matrices.len())
        .entry("identical", identical);
    Ok(r)
}
