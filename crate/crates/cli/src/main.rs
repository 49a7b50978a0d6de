//! `lmv`: watch a directory of document images, run every configured
//! engine and structurer on each, and keep the field-level majority.
//!
//! Exit codes:
//! - 0: success
//! - 1: unexpected runtime error (I/O and the like)
//! - 2: invalid configuration, bench spec, arguments, or unparseable input
//! - 3: too few ballots, or another terminal pipeline failure
//! - 4: the input file is not an image

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lmv_core::bench::{self, BenchError, BenchSpec};
use lmv_core::canon::{self, CanonicalFieldMap};
use lmv_core::events::{Level, Logger};
use lmv_core::model::{Ballot, CallStatus, DocumentId, Granularity, Quorum, TieBreak, VotingConfig};
use lmv_core::pipeline::{Pipeline, PipelineConfig, PipelineOutcome};
use lmv_core::store::Store;
use lmv_core::vote::{explain, majority_vote, VoteError};

#[derive(Debug, Parser)]
#[command(name = "lmv", version, about = "Multi-engine document extraction with field-level majority voting")]
struct Cli {
    /// Pipeline configuration file (JSON).
    #[arg(long, global = true, env = "LMV_CONFIG")]
    config: Option<PathBuf>,

    /// Minimum level of the JSON log lines written to stderr.
    #[arg(long, global = true, default_value = "info")]
    log_level: Level,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Poll the input directory and process every new image until the
    /// horizon passes or the process receives Ctrl-C / SIGTERM.
    Watch(WatchArgs),
    /// Process one file and print the consensus JSON.
    Process(ProcessArgs),
    /// Vote over JSON files given on the command line and print the
    /// consensus; earlier files win priority tie-breaks.
    Vote(VoteArgs),
    /// Run a benchmark spec over a synthetic corpus.
    Bench(BenchArgs),
    /// Render report.md from records.jsonl.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct MonitorOverrides {
    /// Directory to watch (overrides monitor.directory).
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Polling interval in milliseconds (overrides monitor.interval_ms).
    #[arg(long)]
    interval_ms: Option<u64>,
    /// Also require the file's magic bytes to match its extension.
    #[arg(long)]
    strict_magic: bool,
    /// Output directory (overrides output_dir).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Write ballots and vote explanations under <output_dir>/audit.
    #[arg(long)]
    audit: bool,
}

#[derive(Debug, Args)]
struct WatchArgs {
    #[command(flatten)]
    overrides: MonitorOverrides,
    /// Stop after this many milliseconds (default: run until signalled).
    #[arg(long)]
    horizon_ms: Option<u64>,
    /// Documents processed concurrently (overrides max_in_flight).
    #[arg(long)]
    max_in_flight: Option<usize>,
}

#[derive(Debug, Args)]
struct ProcessArgs {
    /// Image file to process.
    file: PathBuf,
    #[command(flatten)]
    overrides: MonitorOverrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GranularityArg {
    Field,
    Document,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TieBreakArg {
    Priority,
    Lexicographic,
}

#[derive(Debug, Args)]
struct VoteArgs {
    /// Ballot files, each holding one JSON object.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Minimum number of ballots [default: 3, or the config's voting.min_ballots]
    #[arg(long)]
    min_ballots: Option<usize>,
    /// Fixed inclusion quorum [default: majority, floor(n/2) + 1]
    #[arg(long)]
    quorum: Option<usize>,
    /// Vote per key path or per whole document [default: field]
    #[arg(long, value_enum)]
    granularity: Option<GranularityArg>,
    /// Rule for equal counts [default: priority]
    #[arg(long, value_enum)]
    tie_break: Option<TieBreakArg>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Bench spec file (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    /// Shipped preset instead of a spec file: tables or correlated.
    #[arg(long)]
    preset: Option<String>,
    /// Working directory for the corpus, runs and reports.
    #[arg(long, default_value = "bench_out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directory holding records.jsonl [default: the config's output_dir]
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let log = Logger::stderr(cli.log_level);
    let result = match &cli.command {
        Command::Watch(args) => cmd_watch(&cli, args, &log),
        Command::Process(args) => cmd_process(&cli, args, &log),
        Command::Vote(args) => cmd_vote(&cli, args),
        Command::Bench(args) => cmd_bench(args, &log),
        Command::Report(args) => cmd_report(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("lmv: {failure}");
            ExitCode::from(failure.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let path = path.ok_or_else(|| Failure::new(2, "no configuration: pass --config or set LMV_CONFIG"))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::new(2, format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::new(2, format!("invalid config {}: {e}", path.display())))
}

fn apply_overrides(cfg: &mut PipelineConfig, o: &MonitorOverrides) {
    if let Some(dir) = &o.dir {
        cfg.monitor.directory = dir.clone();
    }
    if let Some(ms) = o.interval_ms {
        cfg.monitor.interval_ms = ms;
    }
    if o.strict_magic {
        cfg.monitor.strict_magic = true;
    }
    if let Some(out) = &o.output_dir {
        cfg.output_dir = out.clone();
    }
    if o.audit {
        cfg.audit = true;
    }
}

fn build_pipeline(cfg: PipelineConfig, log: &Logger) -> Result<Pipeline, Failure> {
    Pipeline::new(cfg, log.clone()).map_err(|e| Failure::new(2, e.to_string()))
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::new(1, format!("cannot start runtime: {e}")))
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn cmd_watch(cli: &Cli, args: &WatchArgs, log: &Logger) -> Outcome {
    let mut cfg = load_config(cli.config.as_deref())?;
    apply_overrides(&mut cfg, &args.overrides);
    if args.horizon_ms.is_some() {
        cfg.monitor.horizon_ms = args.horizon_ms;
    }
    if let Some(n) = args.max_in_flight {
        cfg.max_in_flight = n;
    }
    let pipeline = Arc::new(build_pipeline(cfg, log)?);
    if !pipeline.config().monitor.directory.is_dir() {
        return Err(Failure::new(
            2,
            format!("monitor.directory {} is not a directory", pipeline.config().monitor.directory.display()),
        ));
    }
    runtime()?.block_on(pipeline.run_loop(shutdown_signal(), None));
    pipeline
        .store()
        .render_report()
        .map_err(|e| Failure::new(1, format!("report: {e}")))?;
    Ok(())
}

fn cmd_process(cli: &Cli, args: &ProcessArgs, log: &Logger) -> Outcome {
    let mut cfg = load_config(cli.config.as_deref())?;
    apply_overrides(&mut cfg, &args.overrides);
    let pipeline = build_pipeline(cfg, log)?;
    if !args.file.is_file() {
        return Err(Failure::new(2, format!("{} is not a readable file", args.file.display())));
    }
    let doc = pipeline
        .document_for(&args.file)
        .map_err(|e| Failure::new(1, format!("cannot read {}: {e}", args.file.display())))?
        .ok_or_else(|| Failure::new(4, format!("{} is not an image", args.file.display())))?;
    let result = runtime()?.block_on(pipeline.process_document(&doc));
    match &result.outcome {
        PipelineOutcome::Consensus { vote } => {
            let rendered = canon::render(&vote.fields).map_err(|e| Failure::new(1, e.to_string()))?;
            println!("{rendered}");
            Ok(())
        }
        PipelineOutcome::AlreadyPersisted => {
            let path = pipeline.store().final_path(&doc.id);
            let text = fs::read_to_string(&path)
                .map_err(|e| Failure::new(1, format!("cannot read {}: {e}", path.display())))?;
            println!("{text}");
            Ok(())
        }
        // Every terminal failure (too few ballots, store errors) maps to 3.
        PipelineOutcome::Failed { failure } => Err(Failure::new(3, failure.to_string())),
    }
}

fn cmd_vote(cli: &Cli, args: &VoteArgs) -> Outcome {
    let mut voting = match &cli.config {
        Some(path) => load_config(Some(path))?.voting,
        None => VotingConfig::default(),
    };
    if let Some(n) = args.min_ballots {
        voting.min_ballots = n;
    }
    if let Some(k) = args.quorum {
        if k == 0 {
            return Err(Failure::new(2, "--quorum must be at least 1"));
        }
        voting.inclusion_quorum = Quorum::Fixed(k);
    }
    if let Some(g) = args.granularity {
        voting.granularity = match g {
            GranularityArg::Field => Granularity::Field,
            GranularityArg::Document => Granularity::Document,
        };
    }
    if let Some(t) = args.tie_break {
        voting.tie_break = match t {
            TieBreakArg::Priority => TieBreak::Priority,
            TieBreakArg::Lexicographic => TieBreak::Lexicographic,
        };
    }

    let mut raws = Vec::new();
    for path in &args.files {
        let raw = fs::read_to_string(path)
            .map_err(|e| Failure::new(2, format!("cannot read ballot {}: {e}", path.display())))?;
        raws.push(raw);
    }
    let document_id = DocumentId::from_bytes(raws.join("\0").as_bytes());
    let mut ballots = Vec::new();
    for (i, (path, raw)) in args.files.iter().zip(raws).enumerate() {
        let fields: CanonicalFieldMap = canon::canonicalize(&raw)
            .map_err(|e| Failure::new(2, format!("unparseable ballot {}: {e}", path.display())))?;
        ballots.push(Ballot {
            document_id: document_id.clone(),
            engine_id: path.display().to_string(),
            structurer_id: "file".into(),
            priority: i as u32 + 1,
            raw_json: raw,
            fields,
            latency_ms: 0,
            status: CallStatus::Ok,
        });
    }
    let outcome = majority_vote(&ballots, &voting).map_err(|e| match e {
        VoteError::InsufficientBallots { .. } => Failure::new(3, e.to_string()),
        other => Failure::new(2, other.to_string()),
    })?;
    let rendered = canon::render(&outcome.fields).map_err(|e| Failure::new(1, e.to_string()))?;
    eprint!("{}", explain(&outcome));
    println!("{rendered}");
    Ok(())
}

fn cmd_bench(args: &BenchArgs, log: &Logger) -> Outcome {
    let spec: BenchSpec = match (&args.spec, &args.preset) {
        (Some(path), _) => bench::load_spec(path),
        (None, Some(name)) => {
            let text = bench::preset(name)
                .ok_or_else(|| Failure::new(2, format!("unknown preset {name:?} (tables, correlated)")))?;
            bench::parse_spec(text)
        }
        (None, None) => unreachable!("clap requires --spec or --preset"),
    }
    .map_err(bench_failure)?;
    let report = bench::run_benchmark(&spec, &args.out, log).map_err(bench_failure)?;
    print!("{}", bench::render_bench_report(&report));
    Ok(())
}

fn bench_failure(e: BenchError) -> Failure {
    let code = match e {
        BenchError::SpecInvalid(_) | BenchError::TargetNotEmpty(_) | BenchError::CorpusMismatch(_) => 2,
        _ => 1,
    };
    Failure::new(code, e.to_string())
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Outcome {
    let output_dir = match &args.output_dir {
        Some(dir) => dir.clone(),
        None => load_config(cli.config.as_deref())?.output_dir,
    };
    let path = Store::new(&output_dir).render_report().map_err(|e| match e {
        lmv_core::store::StoreError::ReportFailure { .. } => Failure::new(2, e.to_string()),
        other => Failure::new(1, other.to_string()),
    })?;
    println!("{}", path.display());
    Ok(())
}
