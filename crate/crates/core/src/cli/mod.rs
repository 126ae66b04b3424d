//! Command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 numerical abort, 4 partial benchmark failure.

pub mod config;
pub mod experiment;
pub mod report;
pub mod selfcheck;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::par::{with_jobs, Execution};
use config::{ExperimentConfig, Mode};
use experiment::ModelArtifact;
use report::{render_table, ResultRow, ResultsFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dtbks", version, about = "Deep Student's-t random-feature networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit on the first split and save the posterior.
    Train(RunArgs),
    /// Apply a saved model to the configured dataset.
    Predict(RunArgs),
    /// Repeated-split benchmark.
    Benchmark(RunArgs),
    /// Paired dtbks versus rks-prior comparison.
    Ablate(RunArgs),
    /// Run the numerical property checks.
    Selfcheck,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides both the split seed and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

impl RunArgs {
    /// Loads the file, applies flag overrides and validates.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.fit.seed = seed;
            cfg.split.base_seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(mode) = self.mode {
            cfg.mode = mode;
        }
        if let Some(r) = self.repeats {
            cfg.split.repeats = r;
        }
        cfg.validated()
    }

    fn execution(&self) -> Execution {
        if self.jobs == 1 {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

/// Prints to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn emit_rows(command: &str, cfg: ExperimentConfig, rows: Vec<ResultRow>) -> Result<i32> {
    ensure_dir(&cfg.output)?;
    let path = cfg.output.join("results.json");
    say!("{}", render_table(&rows).trim_end());
    let partial = rows.iter().any(ResultRow::failed);
    for row in rows.iter().filter(|r| r.failed()) {
        for f in &row.failures {
            eprintln!("{} {} repeat {}: {}", row.dataset, row.mode, f.repeat, f.error);
        }
    }
    ResultsFile::new(command, cfg, rows).write(&path)?;
    say!("results written to {}", path.display());
    Ok(if partial { EXIT_PARTIAL } else { EXIT_OK })
}

fn run_command(command: &Command) -> Result<i32> {
    match command {
        Command::Selfcheck => {
            let checks = selfcheck::run_all();
            for c in &checks {
                say!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if checks.iter().all(|c| c.passed) { EXIT_OK } else { EXIT_NUMERICAL })
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let (artifact, summary) = with_jobs(args.jobs, || experiment::train(&cfg))??;
            ensure_dir(&cfg.output)?;
            artifact.write(&cfg.output.join("model.json"))?;
            write_json(&cfg.output.join("train_report.json"), &summary)?;
            say!(
                "{} test {} = {} (baseline {}), {} epochs, {:.1}s; model written to {}",
                artifact.dataset,
                summary.metric,
                summary.test_metric,
                summary.baseline,
                summary.report.epochs_run,
                summary.report.wall_seconds,
                cfg.output.join("model.json").display()
            );
            Ok(EXIT_OK)
        }
        Command::Predict(args) => {
            let cfg = args.resolve()?;
            let artifact = ModelArtifact::read(&cfg.output.join("model.json"))?;
            let preds = with_jobs(args.jobs, || experiment::predict(&cfg, &artifact, args.execution()))??;
            let path = cfg.output.join("predictions.json");
            write_json(&path, &preds)?;
            say!("{} {} = {}; predictions written to {}", preds.dataset, preds.metric, preds.value, path.display());
            Ok(EXIT_OK)
        }
        Command::Benchmark(args) => {
            let cfg = args.resolve()?;
            let rows = with_jobs(args.jobs, || experiment::benchmark(&cfg, args.execution()))??;
            emit_rows("benchmark", cfg, rows)
        }
        Command::Ablate(args) => {
            let cfg = args.resolve()?;
            let rows = with_jobs(args.jobs, || experiment::ablate(&cfg, args.execution()))??;
            emit_rows("ablate", cfg, rows)
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run_command(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
