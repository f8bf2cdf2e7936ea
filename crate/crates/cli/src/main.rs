use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rnnblock::blocked::{run_multistep, ExecOptions, Trace};
use rnnblock::cells::CellKind;
use rnnblock::harness::{self, BenchOptions, RunSpec, VerifyReport, DEFAULT_BLOCKS, DEFAULT_REPEATS};
use rnnblock::model::{
    self, count_params, generate_sequence, input_seed, AnyWeightSet, ModelPreset, PresetSize, RnnConfig, WeightSet,
    DEFAULT_SEQ_LEN,
};
use rnnblock::numeric::{Matrix, Precision, Scalar};
use rnnblock::traffic::{estimate_traffic, validate_against_trace, MODEL_ASSUMPTIONS};
use rnnblock::{with_threads, Error};

#[derive(Parser)]
#[command(
    name = "rnnblock",
    version,
    about = "Multi-time-step RNN inference: generate, verify, time, model traffic"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded weight file.
    GenWeights {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded input sequence (the same one `verify` and `bench` generate).
    GenSeq {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
        seq_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare blocked execution with the stepwise oracle for every block size.
    Verify {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Weight file to verify instead of seeded weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Input sequence file instead of a seeded sequence.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Verify, then time every block size and write raw and summary CSVs.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = DEFAULT_REPEATS)]
        repeats: usize,
        /// Time without verifying first.
        #[arg(long)]
        skip_verify: bool,
        /// Also time the stepwise oracle for SRU and QRNN.
        #[arg(long)]
        stepwise: bool,
        /// Fuse each block's gate products into one stacked gemm.
        #[arg(long)]
        stacked: bool,
        /// Raw per-run CSV; the summary goes to `<stem>.summary.csv` and run
        /// metadata to `<stem>.meta`. Without it the summary is printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate weight traffic per block size.
    Traffic {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
        seq_len: usize,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BLOCKS)]
        blocks: Vec<usize>,
        /// Run the executor with call tracing and check the model against it.
        #[arg(long)]
        validate: bool,
        /// Write the call traces (implies --validate).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CellArg {
    Lstm,
    Sru,
    Qrnn,
}

impl From<CellArg> for CellKind {
    fn from(c: CellArg) -> Self {
        match c {
            CellArg::Lstm => CellKind::Lstm,
            CellArg::Sru => CellKind::Sru,
            CellArg::Qrnn => CellKind::Qrnn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SizeArg {
    Small,
    Large,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "sru")]
    cell: CellArg,
    /// Preset width for the cell (default: small).
    #[arg(long, value_enum, conflicts_with = "width")]
    preset: Option<SizeArg>,
    /// Square model of this width instead of a preset.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl ModelArgs {
    fn config(&self) -> RnnConfig {
        let kind = self.cell.into();
        let precision = match self.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
        let width = self.width.unwrap_or_else(|| {
            let size = match self.preset.unwrap_or(SizeArg::Small) {
                SizeArg::Small => PresetSize::Small,
                SizeArg::Large => PresetSize::Large,
            };
            ModelPreset::new(kind, size).width()
        });
        RnnConfig::square(kind, width, precision).with_layers(self.layers)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = DEFAULT_SEQ_LEN)]
    seq_len: usize,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BLOCKS)]
    blocks: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

/// Failure of a subcommand, already classified by exit status.
enum Failure {
    Verification(String),
    Usage(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Verification(m) | Failure::Usage(m) | Failure::Io(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::DimensionMismatch { .. } | Error::InvalidArgument(_) | Error::InvalidConfig(_) => {
                Failure::Usage(msg)
            }
            Error::TraceMismatch { .. } | Error::Unverified => Failure::Verification(msg),
            Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::ShapeInconsistent(_)
            | Error::PrecisionMismatch { .. }
            | Error::Io(_)
            | Error::Csv(_) => Failure::Io(msg),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::GenWeights { model, out } => gen_weights(&model, &out),
        Command::GenSeq { model, seq_len, out } => gen_seq(&model, seq_len, &out),
        Command::Verify {
            model,
            run,
            weights,
            input,
        } => verify(&model, &run, weights.as_deref(), input.as_deref()),
        Command::Bench {
            model,
            run,
            repeats,
            skip_verify,
            stepwise,
            stacked,
            out,
        } => {
            let opts = BenchOptions {
                repeats,
                threads: run.threads,
                include_stepwise: stepwise,
                skip_verify,
                exec: ExecOptions { stacked },
            };
            bench(&model, &run, &opts, out.as_deref())
        }
        Command::Traffic {
            model,
            seq_len,
            blocks,
            validate,
            trace,
            out,
        } => traffic(
            &model,
            seq_len,
            &blocks,
            validate || trace.is_some(),
            trace.as_deref(),
            out.as_deref(),
        ),
    }
}

fn check_blocks(blocks: &[usize]) -> Outcome {
    if blocks.is_empty() || blocks.contains(&0) {
        return Err(Failure::Usage("--blocks needs positive block sizes".into()));
    }
    Ok(())
}

fn create_parent(path: &Path) -> Outcome {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

fn gen_weights(model: &ModelArgs, out: &Path) -> Outcome {
    create_parent(out)?;
    let cfg = model.config();
    match AnyWeightSet::generate(&cfg, model.seed)? {
        AnyWeightSet::F32(ws) => model::save_weights(&ws, out)?,
        AnyWeightSet::F64(ws) => model::save_weights(&ws, out)?,
    }
    println!(
        "wrote {} ({cfg}, {} parameters, seed {})",
        out.display(),
        count_params(&cfg)?,
        model.seed
    );
    Ok(())
}

fn gen_seq(model: &ModelArgs, seq_len: usize, out: &Path) -> Outcome {
    create_parent(out)?;
    let cfg = model.config();
    let seed = input_seed(model.seed);
    match cfg.precision {
        Precision::F32 => model::save_sequence(&generate_sequence::<f32>(seq_len, cfg.d_in, seed)?, out)?,
        Precision::F64 => model::save_sequence(&generate_sequence::<f64>(seq_len, cfg.d_in, seed)?, out)?,
    }
    println!("wrote {} ({seq_len} x {}, {})", out.display(), cfg.d_in, cfg.precision);
    Ok(())
}

fn print_report(report: &VerifyReport) {
    println!(
        "{} d_in={} d_h={} layers={} {} L={} tolerance={:e}",
        report.config.kind,
        report.config.d_in,
        report.config.d_h,
        report.config.n_layers,
        report.config.precision,
        report.seq_len,
        report.tolerance
    );
    for row in &report.rows {
        println!(
            "  T={:<4} max|diff|={:.3e} {}",
            row.block,
            row.max_abs_diff,
            if row.passed { "ok" } else { "FAIL" }
        );
    }
}

fn verify_loaded<S: Scalar>(
    ws: &WeightSet<S>,
    input: Option<&Path>,
    run: &RunArgs,
    seed: u64,
) -> Result<VerifyReport, Failure> {
    let x: Matrix<S> = match input {
        Some(p) => model::load_sequence(p)?,
        None => generate_sequence(run.seq_len, ws.config().d_in, input_seed(seed))?,
    };
    Ok(with_threads(run.threads, || harness::verify_with(ws, &x, &run.blocks))?)
}

fn verify(model: &ModelArgs, run: &RunArgs, weights: Option<&Path>, input: Option<&Path>) -> Outcome {
    check_blocks(&run.blocks)?;
    let report = match (weights, input) {
        (None, None) => {
            let spec = RunSpec::new(model.config(), run.seq_len, &run.blocks, model.seed);
            with_threads(run.threads, || harness::verify(&spec))?
        }
        _ => {
            let ws = match weights {
                Some(p) => model::load_weights(p)?,
                None => AnyWeightSet::generate(&model.config(), model.seed)?,
            };
            match &ws {
                AnyWeightSet::F32(w) => verify_loaded(w, input, run, model.seed)?,
                AnyWeightSet::F64(w) => verify_loaded(w, input, run, model.seed)?,
            }
        }
    };
    print_report(&report);
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "blocked output differs from the stepwise oracle by {:.3e} (tolerance {:e})",
            report.max_abs_diff(),
            report.tolerance
        )))
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn bench(model: &ModelArgs, run: &RunArgs, opts: &BenchOptions, out: Option<&Path>) -> Outcome {
    check_blocks(&run.blocks)?;
    let spec = RunSpec::new(model.config(), run.seq_len, &run.blocks, model.seed);
    let report = if opts.skip_verify {
        None
    } else {
        let mut blocks = spec.blocks.clone();
        blocks.push(1);
        blocks.sort_unstable();
        blocks.dedup();
        let mut check = spec.clone();
        check.blocks = blocks;
        let report = with_threads(run.threads, || harness::verify(&check))?;
        print_report(&report);
        if !report.passed() {
            return Err(Failure::Verification("verification failed; refusing to time".into()));
        }
        Some(report)
    };
    let outcome = harness::bench(&spec, opts, report.as_ref())?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = out {
        create_parent(path)?;
        harness::emit_csv(&outcome.records, path)?;
        let summary = sibling(path, ".summary.csv");
        harness::emit_csv(&outcome.summary, &summary)?;
        let meta = sibling(path, ".meta");
        let mut f = BufWriter::new(File::create(&meta)?);
        writeln!(f, "config={}", spec.config)?;
        writeln!(f, "seq_len={}", spec.seq_len)?;
        writeln!(f, "seed={}", spec.seed)?;
        writeln!(f, "repeats={}", opts.repeats)?;
        writeln!(f, "stacked={}", opts.exec.stacked)?;
        outcome.write_metadata(&mut f)?;
        f.flush()?;
        println!("wrote {}, {} and {}", path.display(), summary.display(), meta.display());
    }
    harness::write_csv(&outcome.summary, io::stdout())?;
    Ok(())
}

fn traced_run<S: Scalar>(ws: &WeightSet<S>, seq_len: usize, block: usize, seed: u64) -> Result<Trace, Failure> {
    let x = generate_sequence::<S>(seq_len, ws.config().d_in, input_seed(seed))?;
    let mut trace = Trace::new();
    run_multistep(ws, &x, block, ExecOptions::default(), Some(&mut trace))?;
    Ok(trace)
}

fn traffic(
    model: &ModelArgs,
    seq_len: usize,
    blocks: &[usize],
    validate: bool,
    trace_out: Option<&Path>,
    out: Option<&Path>,
) -> Outcome {
    check_blocks(blocks)?;
    let cfg = model.config();
    let reports = blocks
        .iter()
        .map(|&t| estimate_traffic(&cfg, seq_len, t))
        .collect::<rnnblock::Result<Vec<_>>>()?;
    let rows: Vec<_> = reports.iter().map(|r| r.row()).collect();
    match out {
        Some(path) => {
            create_parent(path)?;
            harness::emit_csv(&rows, path)?;
            println!("wrote {}", path.display());
        }
        None => harness::write_csv(&rows, io::stdout())?,
    }
    eprintln!("model assumptions: {MODEL_ASSUMPTIONS}");
    if !validate {
        return Ok(());
    }
    let ws = AnyWeightSet::generate(&cfg, model.seed)?;
    let mut trace_file = match trace_out {
        Some(p) => {
            create_parent(p)?;
            let mut f = BufWriter::new(File::create(p)?);
            writeln!(f, "block,layer,phase,op,m,k,n,bias")?;
            Some(f)
        }
        None => None,
    };
    for report in &reports {
        let trace = match &ws {
            AnyWeightSet::F32(w) => traced_run(w, seq_len, report.block_size, model.seed)?,
            AnyWeightSet::F64(w) => traced_run(w, seq_len, report.block_size, model.seed)?,
        };
        if let Some(f) = trace_file.as_mut() {
            let mut buf = Vec::new();
            trace.write_csv(&mut buf)?;
            for line in String::from_utf8_lossy(&buf).lines().skip(1) {
                writeln!(f, "{},{line}", report.block_size)?;
            }
        }
        let cmp = validate_against_trace(report, &trace)?;
        eprintln!(
            "T={}: trace matches model ({} weight elements, {} gemm, {} gemv)",
            report.block_size,
            cmp.traced_elements,
            trace.gemm_count(),
            trace.gemv_count()
        );
    }
    if let Some(mut f) = trace_file {
        f.flush()?;
    }
    Ok(())
}
