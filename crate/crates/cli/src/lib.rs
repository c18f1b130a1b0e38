//! Command-line front end for the plumerom pipeline.
//!
//! Every subcommand writes its artifacts into a directory together with a
//! `run.json` manifest holding the tool version and the complete
//! [`RunConfig`](config::RunConfig). Exit codes: 0 success, 2 configuration
//! error, 3 data error, 4 numerical failure.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use plumerom::{ErrorClass, RomError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Rom(#[from] RomError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Rom(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "plumerom", version, about = "POD/GPR reduced-order models of plume fields")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration, or a `run.json` manifest from a previous run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a surrogate snapshot dataset.
    Generate(GenerateArgs),
    /// Train a reduced-order model on a dataset.
    Train(TrainArgs),
    /// Predict a field at one parameter point.
    Predict(PredictArgs),
    /// Score a model on the test or training split of its dataset.
    Evaluate(EvaluateArgs),
    /// Sweep the training-set size.
    Robustness(RobustnessArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// Grid resolution as `NXxNZ`.
    #[arg(long, value_parser = config::parse_grid)]
    pub grid: Option<(usize, usize)>,
    /// `concentration` or `flux`.
    #[arg(long)]
    pub channel: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Number of retained modes.
    #[arg(long = "modes", short = 'L')]
    pub n_modes: Option<usize>,
    /// `mll`, `map` or `prior`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Physical parameters `u_zc,z0,x_src,z_src`.
    #[arg(long, value_parser = config::parse_point, conflicts_with = "unit", allow_hyphen_values = true)]
    pub mu: Option<[f64; 4]>,
    /// Unit-cube coordinates `u1,u2,u3,u4`.
    #[arg(long, value_parser = config::parse_point)]
    pub unit: Option<[f64; 4]>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Test,
    Train,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated training sizes.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.global.config {
        Some(path) => config::load_config(path)?,
        None => config::RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
    }
    let jobs = cli.global.jobs.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let force = cli.global.force;
    pool.install(|| match cli.command {
        Command::Generate(a) => commands::generate(config, a, force),
        Command::Train(a) => commands::train(config, a, force),
        Command::Predict(a) => commands::predict(config, a, force),
        Command::Evaluate(a) => commands::evaluate(config, a, force),
        Command::Robustness(a) => commands::robustness(config, a, force),
    })
}
