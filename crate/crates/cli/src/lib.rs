//! `asr-lab`: experiment driver for adaptive negative sampling.

pub mod commands;
pub mod config;
pub mod error;
pub mod schema;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "asr-lab", version, about = "Adaptive negative sampling experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one episode per seed and write logs, summaries and checkpoints.
    Train(CommonArgs),
    /// Sweep the six initial distributions and report dip rates.
    AblateInit(CommonArgs),
    /// Softmax policy gradient on a one-state bandit.
    Bandit(CommonArgs),
    /// Compare samplers and losses across seeds.
    Compare(CommonArgs),
    /// Evaluate saved encoders on the test split.
    Eval(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML file with flat or dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl CommonArgs {
    pub fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

/// Read `ASR_LAB_THREADS` and size the worker pool.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("ASR_LAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("ASR_LAB_THREADS must be a positive integer, got `{raw}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    match &cli.command {
        Command::Train(a) => commands::train(&a.load()?),
        Command::AblateInit(a) => commands::ablate(&a.load()?),
        Command::Bandit(a) => commands::bandit(&a.load()?),
        Command::Compare(a) => commands::compare(&a.load()?),
        Command::Eval(a) => commands::eval(&a.load()?),
    }
}
