//! Run configuration: file defaults, command-line overrides, validation.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use dpabc::mcem::McemSchedule;
use dpabc::mechanisms::{MechanismKind, MechanismSpec, PrivacyBudget};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Privatize,
    Abc,
    AbcIs,
    Mcem,
    Posterior,
    MleOracle,
    ReproducePaper,
}

impl Experiment {
    pub fn as_str(&self) -> &'static str {
        match self {
            Experiment::Privatize => "privatize",
            Experiment::Abc => "abc",
            Experiment::AbcIs => "abc-is",
            Experiment::Mcem => "mcem",
            Experiment::Posterior => "posterior",
            Experiment::MleOracle => "mle-oracle",
            Experiment::ReproducePaper => "reproduce-paper",
        }
    }
}

/// Everything a run needs. Serialized verbatim into the output directory,
/// and accepted back through `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub alpha: f64,
    pub beta: f64,
    pub mechanism: MechanismSpec,
    pub s_obs: f64,
    /// Raw query value for `privatize`.
    pub s: Option<f64>,
    /// Sample size of the experiment; each experiment has its own default.
    pub n: Option<usize>,
    pub seed: u64,
    pub schedule: String,
    pub theta_init: f64,
    pub out: PathBuf,
    /// Worker cap; `None` uses every available core.
    pub threads: Option<usize>,
    /// Accepted ABC draws in `reproduce-paper`.
    pub abc_n: usize,
    pub grid_points: usize,
    /// Use the 1e7-draw final MCEM stage in `reproduce-paper`.
    pub full_scale: bool,
}

pub const DEFAULT_SCHEDULE: &str = "1e-3:1000,1e-4:100000,1e-5:1000000";
pub const FULL_SCHEDULE: &str = "1e-3:1000,1e-4:100000,1e-5:10000000";

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::ReproducePaper,
            alpha: 25.0,
            beta: 1.0,
            mechanism: MechanismSpec {
                kind: MechanismKind::LaplaceEps,
                epsilon: 0.2,
                delta: 0.0,
                gs: 1.0,
                p: 1,
            },
            s_obs: 37.4,
            s: None,
            n: None,
            seed: 0,
            schedule: DEFAULT_SCHEDULE.into(),
            theta_init: 1.0,
            out: PathBuf::from("out"),
            threads: None,
            abc_n: crate::criteria::DESK_ABC_N,
            grid_points: dpabc::oracle_gp::DEFAULT_GRID_POINTS,
            full_scale: false,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        PrivacyBudget::new(self.mechanism.epsilon, self.mechanism.delta)
            .map_err(|e| CliError::Config(e.to_string()))?;
        positive("sensitivity", self.mechanism.gs)?;
        if self.mechanism.p != 1 {
            return Err(CliError::Config(format!(
                "the Gamma-Poisson model has a scalar query, got p = {}",
                self.mechanism.p
            )));
        }
        self.mechanism
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !self.s_obs.is_finite() {
            return Err(CliError::Config("s_obs must be finite".into()));
        }
        if self.n == Some(0) || self.abc_n == 0 {
            return Err(CliError::Config("sample sizes must be positive".into()));
        }
        if self.grid_points < 2 {
            return Err(CliError::Config("grid needs at least 2 points".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be positive".into()));
        }
        positive("theta_init", self.theta_init)?;
        self.mcem_schedule()?;
        Ok(())
    }

    pub fn mcem_schedule(&self) -> Result<McemSchedule, CliError> {
        let text = if self.full_scale && self.schedule == DEFAULT_SCHEDULE {
            FULL_SCHEDULE
        } else {
            self.schedule.as_str()
        };
        text.parse::<McemSchedule>()
            .map(|s| s.with_theta_init(vec![self.theta_init]))
            .map_err(|e| CliError::Config(format!("schedule: {e}")))
    }

    /// Oracle-backed experiments need the counting-query epsilon-Laplace
    /// mechanism the closed form is written for.
    pub fn require_counting_laplace(&self) -> Result<(), CliError> {
        let m = &self.mechanism;
        if m.kind != MechanismKind::LaplaceEps || m.gs != 1.0 {
            return Err(CliError::Config(format!(
                "{} needs the epsilon-Laplace counting mechanism (gs = 1), got {m}",
                self.experiment.as_str()
            )));
        }
        Ok(())
    }
}
