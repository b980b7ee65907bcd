//! Command-line experiments: privatize a count, sample its posterior with
//! ABC, fit it by Monte Carlo EM, tabulate oracle densities, and rerun the
//! reference Gamma-Poisson study end to end.

pub mod commands;
pub mod config;
pub mod criteria;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dpabc::mechanisms::MechanismKind;

pub use commands::{execute, RunReport};
pub use config::{Experiment, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "dpabc", version, about = "Exact inference on differentially private counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Release a raw query value through the configured mechanism.
    Privatize(Overrides),
    /// Rejection ABC posterior draws.
    Abc(Overrides),
    /// Importance-sampling ABC with the prior as proposal.
    AbcIs(Overrides),
    /// Staged Monte Carlo EM with observed score and information.
    Mcem(Overrides),
    /// Prior, naive and exact posterior densities on a grid.
    Posterior(Overrides),
    /// Maximizer and curvature of the exact marginal likelihood.
    MleOracle(Overrides),
    /// Full reference study with pass/fail summary.
    ReproducePaper(Overrides),
}

impl Command {
    fn split(self) -> (Experiment, Overrides) {
        match self {
            Command::Privatize(o) => (Experiment::Privatize, o),
            Command::Abc(o) => (Experiment::Abc, o),
            Command::AbcIs(o) => (Experiment::AbcIs, o),
            Command::Mcem(o) => (Experiment::Mcem, o),
            Command::Posterior(o) => (Experiment::Posterior, o),
            Command::MleOracle(o) => (Experiment::MleOracle, o),
            Command::ReproducePaper(o) => (Experiment::ReproducePaper, o),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// laplace-eps, laplace-smooth or gaussian.
    #[arg(long)]
    pub mechanism: Option<String>,
    /// Sensitivity the bandwidth is calibrated from.
    #[arg(long)]
    pub gs: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub s_obs: Option<f64>,
    /// Raw query value to privatize.
    #[arg(long, allow_hyphen_values = true)]
    pub s: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// MCEM stages as tol:n,tol:n,...
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub theta_init: Option<f64>,
    /// Accepted ABC draws in reproduce-paper.
    #[arg(long)]
    pub abc_n: Option<usize>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// Use 1e7 draws in the final MCEM stage.
    #[arg(long)]
    pub full_scale: bool,
}

fn parse_kind(text: &str) -> Result<MechanismKind, CliError> {
    match text {
        "laplace-eps" => Ok(MechanismKind::LaplaceEps),
        "laplace-smooth" => Ok(MechanismKind::LaplaceSmooth),
        "gaussian" => Ok(MechanismKind::Gaussian),
        other => Err(CliError::Config(format!("unknown mechanism `{other}`"))),
    }
}

/// Merges the config file (or defaults) with command-line overrides.
pub fn resolve(experiment: Experiment, o: Overrides) -> Result<RunConfig, CliError> {
    let mut c = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    c.experiment = experiment;
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = o.$field {
                c.$field = v;
            }
        };
    }
    set!(alpha);
    set!(beta);
    set!(s_obs);
    set!(seed);
    set!(out);
    set!(schedule);
    set!(theta_init);
    set!(abc_n);
    set!(grid_points);
    if let Some(v) = o.epsilon {
        c.mechanism.epsilon = v;
    }
    if let Some(v) = o.delta {
        c.mechanism.delta = v;
    }
    if let Some(v) = o.gs {
        c.mechanism.gs = v;
    }
    if let Some(kind) = &o.mechanism {
        c.mechanism.kind = parse_kind(kind)?;
    }
    if o.s.is_some() {
        c.s = o.s;
    }
    if o.n.is_some() {
        c.n = o.n;
    }
    if o.threads.is_some() {
        c.threads = o.threads;
    }
    if o.full_scale {
        c.full_scale = true;
    }
    c.validate()?;
    Ok(c)
}

/// Runs a parsed command line on a pool capped at the configured threads.
pub fn run(cli: Cli) -> Result<RunReport, CliError> {
    let (experiment, overrides) = cli.command.split();
    let config = resolve(experiment, overrides)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = config.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| execute(&config))
}
