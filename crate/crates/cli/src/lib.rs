//! Command-line front end: configuration, batch pipeline and commands.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use sdm_core::{Error, Result};

use crate::config::{Config, OUT_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "sdm", version, about = "Lift 2D joints to 3D poses with a shape decomposition model")]
pub struct Args {
    /// TOML experiment file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `workers` (0 uses every core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overrides `out_dir` and the SDM_OUT_DIR environment variable.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate train/test 3D poses and projected 2D views.
    Gen,
    /// Learn the dictionaries from the train set.
    Learn,
    /// Lift every 2D view file with every configured method.
    Lift,
    /// Score lifted poses against the test set.
    Eval,
    /// Run parameter sweeps, noise curves and the method comparison.
    Bench,
}

/// Config file, then the out-dir environment variable, then flags.
pub fn resolve_config(args: &Args, env_out_dir: Option<String>) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(dir) = env_out_dir.filter(|d| !d.is_empty()) {
        cfg.out_dir = PathBuf::from(dir);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = args.workers {
        cfg.workers = workers;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

pub fn execute(command: Command, cfg: &Config) -> Result<Vec<String>> {
    match command {
        Command::Gen => commands::cmd_gen(cfg),
        Command::Learn => commands::cmd_learn(cfg),
        Command::Lift => commands::cmd_lift(cfg, &pipeline::worker_pool(cfg.workers)?),
        Command::Eval => commands::cmd_eval(cfg, &pipeline::worker_pool(cfg.workers)?),
        Command::Bench => commands::cmd_bench(cfg, &pipeline::worker_pool(cfg.workers)?),
    }
}

pub fn run(args: &Args) -> Result<Vec<String>> {
    let cfg = resolve_config(args, std::env::var(OUT_DIR_ENV).ok())?;
    execute(args.command, &cfg)
}

/// Process exit status for each error class. Usage errors exit with 2.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidPose(_) => 10,
        Error::DimensionMismatch(_) => 11,
        Error::DegenerateGeometry(_) => 12,
        Error::SingularSystem(_) => 13,
        Error::NotCentered(_) => 14,
        Error::EmptyTrainingSet => 15,
        Error::EmptyBatch => 16,
        Error::InvalidDictionary(_) => 17,
        Error::Parse { .. } => 18,
        Error::SchemaMismatch(_) => 19,
        Error::Config(_) => 20,
        Error::Io { .. } => 21,
    }
}

/// One-line diagnostic: `error kind=<Kind> code=<n> message="<escaped>"`.
pub fn diagnostic(e: &Error) -> String {
    format!("error kind={} code={} message={:?}", e.kind(), exit_code(e), e.to_string())
}
