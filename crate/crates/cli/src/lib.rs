//! `scopf` command-line driver.
//!
//! Subcommands read a TOML [`RunConfig`], run one core operation and write
//! their outputs plus a `manifest.json` of SHA-256 hashes into the output
//! directory. Errors print a single `error: <category>: <message>` line.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use scopf_core::netmodel::parse_case_with;
use scopf_core::scopf::{adversarial_opt, predict_contingencies, smc_scopf, PredictedContingency, ScopfError};
use scopf_core::stresstest::{failure_mode_comparison, stress_test_detailed, StressError, StressReport};
use scopf_core::{cases, Contingency, Dispatch, Network, Scorer};

pub use config::RunConfig;
use report::{Artifact, ResultFile, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("case-parse: {0}")]
    Case(String),
    #[error("solver: {0}")]
    Solver(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Case(_) => 3,
            CliError::Solver(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<ScopfError> for CliError {
    fn from(e: ScopfError) -> Self {
        match e {
            ScopfError::Config(m) => CliError::Config(m),
            other => CliError::Solver(other.to_string()),
        }
    }
}

impl From<StressError> for CliError {
    fn from(e: StressError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "scopf", version, about = "Security-constrained AC OPF by adversarial sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Predict and mitigate contingencies with the SMC attack/defend loop.
    Solve(RunArgs),
    /// Run the alternating gradient (adversarial optimization) baseline.
    Baseline(RunArgs),
    /// Sample high-risk contingencies for a fixed dispatch.
    Attack(RunArgs),
    /// Monte Carlo stress test of a dispatch against prior contingencies.
    Stress(StressArgs),
    /// Per-outage-count failure ratio of two stress reports.
    Compare {
        /// `stress.json` of dispatch A.
        a: PathBuf,
        /// `stress.json` of dispatch B.
        b: PathBuf,
        /// Output directory; without it the table goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct StressArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Overrides `stress.samples`.
    #[arg(long)]
    samples: Option<usize>,
}

/// Parse `argv` (including the program name), run the subcommand and
/// return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: config: {first}");
            return 2;
        }
    };
    match dispatch_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn dispatch_command(command: Command) -> Result<(), CliError> {
    match command {
        Command::Solve(args) => run_scopf("solve", &args),
        Command::Baseline(args) => run_scopf("baseline", &args),
        Command::Attack(args) => run_attack(&args),
        Command::Stress(args) => run_stress(&args),
        Command::Compare { a, b, out } => run_compare(&a, &b, out.as_deref()),
    }
}

/// Load the config and apply flag overrides.
fn prepare(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if args.threads == Some(0) {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    Ok(cfg)
}

pub fn load_network(cfg: &RunConfig) -> Result<Network, CliError> {
    let path = &cfg.network.case_path;
    let text = match path.strip_prefix(config::BUILTIN_PREFIX) {
        Some("case14") => cases::CASE14.to_string(),
        Some("case57") => cases::CASE57.to_string(),
        Some(other) => return Err(CliError::Config(format!("unknown builtin case `{other}`"))),
        None => fs::read_to_string(path).map_err(|e| CliError::Case(format!("cannot read {path}: {e}")))?,
    };
    parse_case_with(&text, &cfg.case_options()).map_err(|e| CliError::Case(format!("{path}: {e}")))
}

fn scorer(cfg: &RunConfig) -> Result<Scorer, CliError> {
    Ok(Scorer::new(
        load_network(cfg)?,
        cfg.solver.clone(),
        cfg.penalty.clone(),
        cfg.prior.clone(),
    ))
}

/// Run `work` on a pool of `threads` workers, or the default pool.
fn with_threads<R: Send>(threads: Option<usize>, work: impl FnOnce() -> R + Send) -> Result<(R, usize), CliError> {
    #[cfg(feature = "parallel")]
    {
        let measured = move || {
            let r = work();
            (r, rayon::current_num_threads())
        };
        match threads {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
                Ok(pool.install(measured))
            }
            None => Ok(measured()),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        if threads.is_some_and(|n| n > 1) {
            log::warn!("built without the `parallel` feature; running on one thread");
        }
        Ok((work(), 1))
    }
}

fn finish(out_dir: &Path, command: &str, artifacts: &[Artifact], started: Instant, threads: usize) -> Result<(), CliError> {
    report::write_artifacts(out_dir, command, artifacts).map_err(io_err(out_dir))?;
    report::write_timing(out_dir, started.elapsed().as_secs_f64(), threads).map_err(io_err(out_dir))?;
    log::info!("{command}: wrote {}", out_dir.display());
    Ok(())
}

fn run_scopf(command: &str, args: &RunArgs) -> Result<(), CliError> {
    let cfg = prepare(args)?;
    let scorer = scorer(&cfg)?;
    let smc = cfg.smc_config();
    let started = Instant::now();
    let (result, threads) = with_threads(args.threads, || {
        if command == "solve" {
            smc_scopf(&scorer, &smc)
        } else {
            adversarial_opt(&scorer, &smc)
        }
    })?;
    let result = result?;
    let artifacts = report::scopf_artifacts(
        command,
        cfg.seed,
        &result,
        scorer.network.n_branches(),
        cfg.stress.outage_threshold,
    );
    finish(&cfg.out_dir, command, &artifacts, started, threads)
}

/// A dispatch and, when it came from a `solve`/`baseline` result, the
/// contingencies predicted alongside it.
#[derive(Clone, Debug)]
pub struct DispatchSource {
    pub dispatch: Dispatch,
    pub predicted: Option<Vec<Contingency>>,
}

/// Read a dispatch from a `result.json` or a bare dispatch JSON; `None`
/// gives the network's own set point.
pub fn load_dispatch(path: Option<&Path>, network: &Network) -> Result<DispatchSource, CliError> {
    let Some(path) = path else {
        return Ok(DispatchSource {
            dispatch: network.nominal_dispatch(),
            predicted: None,
        });
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| CliError::Config(format!("{}: {e}", path.display()));
    let value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    let source = if value.get("result").is_some() {
        let file: ResultFile = serde_json::from_value(value).map_err(bad)?;
        DispatchSource {
            dispatch: file.result.best_dispatch,
            predicted: Some(file.result.contingencies.into_iter().map(|c| Contingency::new(c.y)).collect()),
        }
    } else {
        DispatchSource {
            dispatch: serde_json::from_value(value).map_err(bad)?,
            predicted: None,
        }
    };
    if source.dispatch.shape() != network.shape() {
        return Err(CliError::Config(format!(
            "{}: dispatch shape {:?} does not match the network ({:?})",
            path.display(),
            source.dispatch.shape(),
            network.shape()
        )));
    }
    if let Some(p) = &source.predicted {
        if p.iter().any(|c| c.len() != network.n_branches()) {
            return Err(CliError::Config(format!("{}: contingency length mismatch", path.display())));
        }
    }
    Ok(source)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackFile {
    pub schema_version: u32,
    pub seed: u64,
    pub dispatch: Dispatch,
    pub acceptance_rate: f64,
    /// Sorted by descending risk-adjusted severity.
    pub contingencies: Vec<PredictedContingency>,
}

fn run_attack(args: &RunArgs) -> Result<(), CliError> {
    let cfg = prepare(args)?;
    let scorer = scorer(&cfg)?;
    let source = load_dispatch(cfg.attack.dispatch.as_deref(), &scorer.network)?;
    let a = &cfg.attack;
    let started = Instant::now();
    let (prediction, threads) = with_threads(args.threads, || {
        predict_contingencies(&scorer, &source.dispatch, a.n_y, a.steps, a.tau, cfg.seed)
    })?;
    let prediction = prediction?;
    let file = AttackFile {
        schema_version: SCHEMA_VERSION,
        seed: cfg.seed,
        dispatch: source.dispatch,
        acceptance_rate: prediction.stats.acceptance_rate(),
        contingencies: prediction.contingencies,
    };
    let artifacts = [
        Artifact::json("attack.json", &file),
        Artifact::new(
            "contingencies.csv",
            report::contingencies_csv(&file.contingencies, scorer.network.n_branches(), cfg.stress.outage_threshold),
        ),
    ];
    finish(&cfg.out_dir, "attack", &artifacts, started, threads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressFile {
    pub schema_version: u32,
    pub dispatch: Dispatch,
    pub report: StressReport,
}

impl StressFile {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let file: Self = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "{}: schema_version {} is not supported (expected {SCHEMA_VERSION})",
                path.display(),
                file.schema_version
            )));
        }
        Ok(file)
    }
}

fn run_stress(args: &StressArgs) -> Result<(), CliError> {
    let mut cfg = prepare(&args.run)?;
    if let Some(m) = args.samples {
        cfg.stress.samples = m;
    }
    let options = cfg.stress_options();
    options.validate()?;
    let scorer = scorer(&cfg)?;
    let source = load_dispatch(cfg.stress.dispatch.as_deref(), &scorer.network)?;
    let predicted = source.predicted.as_deref().filter(|_| cfg.stress.use_predicted);
    let started = Instant::now();
    let (out, threads) = with_threads(args.run.threads, || {
        stress_test_detailed(&scorer, &source.dispatch, predicted, &options)
    })?;
    let (stress, records) = out?;
    let file = StressFile {
        schema_version: SCHEMA_VERSION,
        dispatch: source.dispatch,
        report: stress,
    };
    let artifacts = [
        Artifact::json("stress.json", &file),
        Artifact::new(
            "severity_distribution.csv",
            report::severity_distribution_csv(&records, report::SEVERITY_BINS),
        ),
        Artifact::new("outage_histogram.csv", report::outage_histogram_csv(&file.report)),
        Artifact::new("samples.csv", report::samples_csv(&records)),
    ];
    finish(&cfg.out_dir, "stress", &artifacts, started, threads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonFile {
    pub schema_version: u32,
    pub failure_rate_a: f64,
    pub failure_rate_b: f64,
    pub rows: Vec<scopf_core::stresstest::FailureModeRow>,
}

fn run_compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let fa = StressFile::read(a)?;
    let fb = StressFile::read(b)?;
    let rows = failure_mode_comparison(&fa.report, &fb.report)?;
    let csv = report::failure_modes_csv(&rows);
    let Some(out) = out else {
        io::stdout().write_all(csv.as_bytes()).map_err(|e| CliError::Io(format!("stdout: {e}")))?;
        return Ok(());
    };
    let file = ComparisonFile {
        schema_version: SCHEMA_VERSION,
        failure_rate_a: fa.report.failure_rate,
        failure_rate_b: fb.report.failure_rate,
        rows,
    };
    let artifacts = [Artifact::json("comparison.json", &file), Artifact::new("failure_modes.csv", csv)];
    report::write_artifacts(out, "compare", &artifacts).map_err(io_err(out))?;
    Ok(())
}
