//! Verification gate, timing harness, speed-up arithmetic and CSV output.

use std::collections::hash_map::DefaultHasher;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{self, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::blocked::{run_multistep, ExecOptions};
use crate::cells::{run_stepwise, CellKind};
use crate::error::{Error, Result};
use crate::model::{generate_sequence, generate_weights, input_seed, RnnConfig, WeightSet};
use crate::numeric::{Matrix, Precision, Scalar};
use crate::par;
use crate::traffic::TrafficRow;

/// Block sizes swept by default (1 through 128, powers of two).
pub const DEFAULT_BLOCKS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];
pub const DEFAULT_REPEATS: usize = 5;

/// `100 · base / t`, rounded to one decimal place.
pub fn speedup(base_ms: f64, t_ms: f64) -> Result<f64> {
    if !(base_ms > 0.0 && t_ms > 0.0) || !base_ms.is_finite() || !t_ms.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "speed-up needs positive times, got {base_ms} and {t_ms}"
        )));
    }
    Ok((1000.0 * base_ms / t_ms).round() / 10.0)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Impl {
    #[serde(rename = "stepwise")]
    Stepwise,
    #[serde(rename = "blocked")]
    Blocked,
    #[serde(rename = "lstm-precomputed")]
    LstmPrecomputed,
}

/// One timed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub cell: CellKind,
    #[serde(rename = "impl")]
    pub implementation: Impl,
    pub d_in: usize,
    pub d_h: usize,
    pub seq_len: usize,
    pub block: usize,
    pub threads: usize,
    pub repeat: usize,
    pub elapsed_ms: f64,
}

/// Summary line in the layout of the published tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub label: String,
    pub median_ms: f64,
    /// Relative to the same cell's `T = 1` median; absent for the stepwise
    /// LSTM reference row.
    pub speedup_pct: Option<f64>,
}

/// Types that can be written by [`emit_csv`].
pub trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

impl CsvRow for BenchRecord {
    const HEADER: &'static [&'static str] = &[
        "cell",
        "impl",
        "d_in",
        "d_h",
        "seq_len",
        "block",
        "threads",
        "repeat",
        "elapsed_ms",
    ];
}

impl CsvRow for SpeedupRow {
    const HEADER: &'static [&'static str] = &["label", "median_ms", "speedup_pct"];
}

impl CsvRow for TrafficRow {
    const HEADER: &'static [&'static str] = &[
        "cell",
        "d_h",
        "precision",
        "L",
        "T",
        "weight_bytes",
        "blocks",
        "est_traffic_bytes",
        "ratio_vs_T1",
    ];
}

/// Writes a header line followed by one line per row. An empty slice
/// yields a header-only file.
pub fn write_csv<T: CsvRow, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(T::HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv<T: CsvRow>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    write_csv(rows, File::create(path)?)
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// What to verify or time.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub config: RnnConfig,
    pub seq_len: usize,
    pub blocks: Vec<usize>,
    pub seed: u64,
}

impl RunSpec {
    pub fn new(config: RnnConfig, seq_len: usize, blocks: &[usize], seed: u64) -> Self {
        Self {
            config,
            seq_len,
            blocks: blocks.to_vec(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub block: usize,
    pub max_abs_diff: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub config: RnnConfig,
    pub seq_len: usize,
    /// Seed the weights and input came from; `None` when they were loaded.
    pub seed: Option<u64>,
    pub tolerance: f64,
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn max_abs_diff(&self) -> f64 {
        self.rows.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max)
    }

    /// Whether this report licenses timing `spec`.
    pub fn covers(&self, spec: &RunSpec) -> bool {
        self.passed()
            && self.config == spec.config
            && self.seq_len == spec.seq_len
            && self.seed == Some(spec.seed)
            && spec.blocks.iter().all(|b| self.rows.iter().any(|r| r.block == *b))
    }
}

/// Compares the blocked executor against the stepwise oracle for every
/// block size, on the given weights and input.
pub fn verify_with<S: Scalar>(weights: &WeightSet<S>, x: &Matrix<S>, blocks: &[usize]) -> Result<VerifyReport> {
    let oracle = run_stepwise(weights, x)?;
    let tolerance = S::PRECISION.oracle_tolerance();
    let rows = blocks
        .iter()
        .map(|&t| {
            let out = run_multistep(weights, x, t, ExecOptions::default(), None)?;
            let d = out.max_abs_diff(&oracle)?;
            Ok(VerifyRow {
                block: t,
                max_abs_diff: d,
                passed: d <= tolerance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        config: *weights.config(),
        seq_len: x.rows(),
        seed: None,
        tolerance,
        rows,
    })
}

/// Generates weights and input from `spec.seed` and verifies them.
pub fn verify(spec: &RunSpec) -> Result<VerifyReport> {
    fn typed<S: Scalar>(spec: &RunSpec) -> Result<VerifyReport> {
        let ws = generate_weights::<S>(&spec.config, spec.seed)?;
        let x = generate_sequence::<S>(spec.seq_len, spec.config.d_in, input_seed(spec.seed))?;
        let mut report = verify_with(&ws, &x, &spec.blocks)?;
        report.seed = Some(spec.seed);
        Ok(report)
    }
    match spec.config.precision {
        Precision::F32 => typed::<f32>(spec),
        Precision::F64 => typed::<f64>(spec),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub repeats: usize,
    pub threads: usize,
    /// Also time the stepwise oracle for SRU/QRNN (always done for LSTM).
    pub include_stepwise: bool,
    pub skip_verify: bool,
    pub exec: ExecOptions,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: DEFAULT_REPEATS,
            threads: 1,
            include_stepwise: false,
            skip_verify: false,
            exec: ExecOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutcome {
    pub records: Vec<BenchRecord>,
    pub summary: Vec<SpeedupRow>,
    pub warnings: Vec<String>,
    pub timer_resolution: Duration,
    pub threads: usize,
    /// Hash of each timed configuration's output, in execution order.
    pub output_digests: Vec<(String, u64)>,
}

impl BenchOutcome {
    /// `key=value` lines describing the run.
    pub fn write_metadata<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "threads={}", self.threads)?;
        writeln!(out, "parallel_backend={}", par::parallel_enabled())?;
        writeln!(out, "timer_resolution_ns={}", self.timer_resolution.as_nanos())?;
        for (label, digest) in &self.output_digests {
            writeln!(out, "output_digest[{label}]={digest:016x}")?;
        }
        for w in &self.warnings {
            writeln!(out, "warning={w}")?;
        }
        Ok(())
    }
}

/// Smallest positive step observed between consecutive clock reads.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn digest<S: Scalar>(m: &Matrix<S>) -> u64 {
    let mut h = DefaultHasher::new();
    m.shape().hash(&mut h);
    for v in m.data() {
        v.as_f64().to_bits().hash(&mut h);
    }
    h.finish()
}

/// Times every block size of `spec` with one untimed warm-up and
/// `opts.repeats` timed runs each. Refuses to run unless `verified` covers
/// `spec` or `opts.skip_verify` is set.
pub fn bench(spec: &RunSpec, opts: &BenchOptions, verified: Option<&VerifyReport>) -> Result<BenchOutcome> {
    if !opts.skip_verify && !verified.is_some_and(|r| r.covers(spec)) {
        return Err(Error::Unverified);
    }
    if opts.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let threads = opts.threads.max(1);
    let mut warnings = Vec::new();
    if threads > 1 && !par::parallel_enabled() {
        warnings.push(format!(
            "built without the parallel feature; --threads {threads} has no effect"
        ));
    }
    let mut outcome = par::with_threads(threads, || match spec.config.precision {
        Precision::F32 => bench_typed::<f32>(spec, opts, threads),
        Precision::F64 => bench_typed::<f64>(spec, opts, threads),
    })?;
    warnings.append(&mut outcome.warnings);
    outcome.warnings = warnings;
    Ok(outcome)
}

fn bench_typed<S: Scalar>(spec: &RunSpec, opts: &BenchOptions, threads: usize) -> Result<BenchOutcome> {
    let cfg = spec.config;
    let ws = generate_weights::<S>(&cfg, spec.seed)?;
    let x = generate_sequence::<S>(spec.seq_len, cfg.d_in, input_seed(spec.seed))?;
    let resolution = timer_resolution();

    let mut blocks = spec.blocks.clone();
    blocks.push(1);
    blocks.sort_unstable();
    blocks.dedup();

    let mut records = Vec::new();
    let mut summary = Vec::new();
    let mut digests = Vec::new();
    let mut warnings = Vec::new();

    let mut time_runs = |implementation: Impl, block: usize, label: String| -> Result<f64> {
        let run = || match implementation {
            Impl::Stepwise => run_stepwise(&ws, &x),
            _ => run_multistep(&ws, &x, block, opts.exec, None),
        };
        let warm = run()?;
        digests.push((label.clone(), digest(&warm)));
        let mut times = Vec::with_capacity(opts.repeats);
        for repeat in 0..opts.repeats {
            let start = Instant::now();
            let out = run()?;
            let elapsed = start.elapsed();
            std::hint::black_box(&out);
            // Clamp to the clock step so elapsed_ms stays positive.
            let elapsed_ms = elapsed.max(resolution).as_nanos() as f64 / 1e6;
            if resolution.as_secs_f64() * 1e3 > 0.01 * elapsed_ms {
                warnings.push(format!(
                    "{label}: timer resolution {:?} exceeds 1% of a {elapsed_ms:.4} ms run",
                    resolution
                ));
            }
            times.push(elapsed_ms);
            records.push(BenchRecord {
                cell: cfg.kind,
                implementation,
                d_in: cfg.d_in,
                d_h: cfg.d_h,
                seq_len: spec.seq_len,
                block,
                threads,
                repeat,
                elapsed_ms,
            });
        }
        Ok(median(&times).expect("repeats >= 1"))
    };

    let label = cfg.kind.label();
    if cfg.kind == CellKind::Lstm || opts.include_stepwise {
        let name = if cfg.kind == CellKind::Lstm {
            label.to_string()
        } else {
            format!("{label}-stepwise")
        };
        let median_ms = time_runs(Impl::Stepwise, 1, name.clone())?;
        summary.push(SpeedupRow {
            label: name,
            median_ms,
            speedup_pct: None,
        });
    }
    let blocked_impl = if cfg.kind == CellKind::Lstm {
        Impl::LstmPrecomputed
    } else {
        Impl::Blocked
    };
    let mut base = None;
    for &t in &blocks {
        let name = format!("{label}-{t}");
        let median_ms = time_runs(blocked_impl, t, name.clone())?;
        let base_ms = *base.get_or_insert(median_ms);
        summary.push(SpeedupRow {
            label: name,
            median_ms,
            speedup_pct: Some(speedup(base_ms, median_ms)?),
        });
    }
    warnings.dedup();
    Ok(BenchOutcome {
        records,
        summary,
        warnings,
        timer_resolution: resolution,
        threads,
        output_digests: digests,
    })
}
