//! Command-line front end.

pub mod commands;
pub mod config;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{Estimator, ExperimentConfig, SamplerKind};

use crate::error::{Error, Result};
use crate::io::{format_data_matrix, write_text, Table};

#[derive(Debug, Parser)]
#[command(
    name = "lindiff",
    version,
    about = "Linear diffusion models: theory and simulation sweeps"
)]
pub struct Cli {
    /// Experiment configuration (`key = value` per line).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sorted eigenvalues of the configured ground truth.
    Spectrum,
    /// Empirical vs predicted divergence over training-set sizes.
    SweepDkl,
    /// Train/test losses, per-step slices and gradient-flow curves.
    LossCurves,
    /// Noise- vs data-prediction training curves.
    CompareObjectives,
    /// Generate samples from a trained linear denoiser.
    Sample,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Parse { .. } => 2,
        Error::Solver { .. } => 3,
        Error::Io { .. } => 1,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("cannot read {}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(cfg: &ExperimentConfig, text: &str) -> Result<()> {
    match &cfg.out {
        Some(path) => write_text(path, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
                _ => Ok(()),
            }
        }
    }
}

/// Run a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        // ignore the error if a pool was already installed in this process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    if let Some(warning) = dkl_warnings(&cfg) {
        eprintln!("warning: {warning}");
    }
    let table: Table = match cli.command {
        Command::Spectrum => commands::cmd_spectrum(&cfg)?,
        Command::SweepDkl => commands::cmd_sweep_dkl(&cfg)?,
        Command::LossCurves => commands::cmd_loss_curves(&cfg)?,
        Command::CompareObjectives => commands::cmd_compare_objectives(&cfg)?,
        Command::Sample => {
            let samples = commands::cmd_sample(&cfg)?;
            return emit(&cfg, &format_data_matrix(&samples));
        }
    };
    emit(&cfg, &table.render())
}

fn dkl_warnings(cfg: &ExperimentConfig) -> Option<String> {
    let truths = commands::truths(cfg).ok()?;
    for truth in &truths {
        for &c in &cfg.c {
            for &n in &cfg.n {
                let input = crate::replica::ReplicaInput::new(truth.model.eigenvalues().as_slice(), n, c).ok()?;
                if let Some(w) = crate::replica::dkl_warning(&input) {
                    return Some(w);
                }
            }
        }
    }
    None
}

/// Parse arguments, run, report errors on stderr and return the exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("lindiff: {err}");
            exit_code(&err)
        }
    }
}
