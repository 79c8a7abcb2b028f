//! Command-line pipeline: `synth`, `refine-graph`, `train`, `evaluate` and
//! `estimate`, driven by one [`RunConfig`].

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use graphvci::Error;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "graphvci", version, about = "Graph variational causal inference pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set training.max_epochs=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Sample a dataset and graphs from a planted structural causal model.
    Synth,
    /// Refine the input graph and write `refined.edges.tsv`.
    RefineGraph,
    /// Train the model and write `model.ckpt` and `metrics.csv`.
    Train,
    /// Score counterfactual predictions on the held-out and validation groups.
    Evaluate,
    /// Estimate covariate-stratified marginal effects.
    Estimate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::RefineGraph => "refine-graph",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Estimate => "estimate",
        }
    }
}

pub fn run(command: Command, cfg: &RunConfig) -> graphvci::Result<()> {
    match command {
        Command::Synth => commands::synth(cfg)?,
        Command::RefineGraph => commands::refine_graph(cfg)?,
        Command::Train => commands::train_model(cfg)?,
        Command::Evaluate => commands::evaluate(cfg)?,
        Command::Estimate => commands::estimate(cfg)?,
    }
    commands::record_config(cfg, command.name())
}

/// 2 for configuration errors, 4 for numerical divergence, 3 for everything
/// else (data, i/o, checkpoints).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let result = RunConfig::load(cli.config.as_deref(), &cli.overrides, cli.seed, cli.out.as_deref())
        .and_then(|cfg| run(cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
