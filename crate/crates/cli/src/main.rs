//! Experiment harness: `nlhomog <solve|homogenize|gamma|verify|benchmark>`.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 solver failure,
//! 4 missing upstream artifacts, 5 failed property suite, 1 I/O errors.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("missing upstream artifact: {0}")]
    MissingUpstream(String),
    #[error("property suite failed: {0}")]
    PropertyFailure(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Solver(_) => 3,
            CliError::MissingUpstream(_) => 4,
            CliError::PropertyFailure(_) => 5,
        }
    }
}

impl From<nlhomog::Error> for CliError {
    fn from(e: nlhomog::Error) -> Self {
        use nlhomog::Error as E;
        match e {
            E::NonConvergence { .. } | E::Linear(_) | E::EmptyMask { .. } => CliError::Solver(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nlhomog", version, about = "Nonlocal p-Laplacian solver and homogenization diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// RNG seed, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single thread and no timestamps, so every output file is
    /// byte-identical across runs.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Solve the Dirichlet problem for the configured kernel and load.
    Solve,
    /// Oscillating-kernel sweep, effective kernel and closed loop.
    Homogenize,
    /// Conjugate convergence against a limit kernel.
    Gamma,
    /// Property suites (integration by parts, monotonicity inequality,
    /// Poincaré monitor, minimizer and uniqueness checks).
    Verify,
    /// Timed semicircle benchmark at the configured resolution.
    Benchmark,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Homogenize => "homogenize",
            Command::Gamma => "gamma",
            Command::Verify => "verify",
            Command::Benchmark => "benchmark",
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out {
        cfg.output.dir = dir.clone();
    }
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if threads == Some(0) {
        return Err(CliError::Validation("--threads must be positive".into()));
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| CliError::Io(e.to_string()))?;
    let ctx = commands::Context {
        deterministic: cli.deterministic,
        threads: pool.current_num_threads(),
        command: cli.command.name(),
    };
    pool.install(|| match cli.command {
        Command::Solve => commands::solve(&cfg, &ctx),
        Command::Homogenize => commands::homogenize(&cfg, &ctx),
        Command::Gamma => commands::gamma(&cfg, &ctx),
        Command::Verify => commands::verify(&cfg, &ctx),
        Command::Benchmark => commands::benchmark(&cfg, &ctx),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
