//! Checks of the Gamma-Poisson experiment against target and
//! independently computed reference values.
//!
//! Each check returns a [`CriterionReport`]. Reports hold only deterministic
//! quantities (no timings), so they can be written into the run summary.

use dpabc::abc::{
    acceptance_rate_from_density, importance_abc, rejection_abc, weighted_estimate, AbcOptions, AbcResult,
    PriorProposal,
};
use dpabc::mcem::{impute, observed_information, observed_information_literal, observed_score, run_mcem, McemOptions, McemSchedule, McemTrace};
use dpabc::mechanisms::{make_epsilon_laplace, verify_dp_bound, AdditiveMechanism, PrivacyBudget};
use dpabc::model::{GammaPoisson, PrivatizedQuery};
use dpabc::oracle_gp::{
    evidence, ln_brute_force_unnorm, ln_posterior_unnorm_closed, marginal_loglik, mle_oracle, DensityGrid, GammaLaw,
    GpSetting,
};
use dpabc::rngkit::RngStream;
use dpabc::stats::{ks_critical_value, ks_statistic};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, Stage};

/// Target maximum likelihood estimate at `epsilon = 0.2`, `s_obs = 37.4`.
pub const TARGET_MLE: f64 = 37.237;
/// Target observed information at that estimate.
pub const TARGET_INFO: f64 = 1.582e-2;
/// Noiseless Poisson estimate `s_obs`.
pub const NOISELESS_MLE: f64 = 37.4;
/// Noiseless observed information `1 / s_obs`, rounded to four digits.
pub const NOISELESS_INFO: f64 = 2.674e-2;
/// Target relative excess of the noiseless information.
pub const TARGET_INFO_EXCESS: f64 = 0.69;

pub const DESK_ABC_N: usize = 100_000;
pub const FULL_ABC_N: usize = 1_000_000;
pub const KS_ALPHA: f64 = 1e-3;
/// Below this many ABC draws the KS comparison is not attempted.
pub const KS_MIN_N: usize = 10_000;
pub const CHECK_THETAS: [f64; 6] = [10.0, 20.0, 30.0, 37.4, 50.0, 80.0];
pub const DP_EPSILONS: [f64; 4] = [0.1, 0.2, 1.0, 5.0];
pub const NEAR_NOISELESS_EPSILON: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionReport {
    pub id: u8,
    pub name: String,
    pub status: Status,
    pub measured: Value,
    pub tolerance: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl CriterionReport {
    fn new(id: u8, name: &str, passed: bool, measured: Value, tolerance: &str) -> Self {
        Self {
            id,
            name: name.into(),
            status: if passed { Status::Pass } else { Status::Fail },
            measured,
            tolerance: tolerance.into(),
            note: None,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    /// One-line human summary.
    pub fn line(&self) -> String {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIP",
        };
        let mut line = format!("{tag} criterion {}: {} | {} | {}", self.id, self.name, self.tolerance, self.measured);
        if let Some(note) = &self.note {
            line.push_str(" | ");
            line.push_str(note);
        }
        line
    }
}

/// Settings shared by the experiment's sub-runs. Every sub-run draws from
/// its own child of the root stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyContext {
    pub setting: GpSetting,
    pub seed: u64,
    pub abc_n: usize,
    pub schedule: McemSchedule,
    pub grid_points: usize,
    /// Draws for importance ABC.
    pub is_n: usize,
    /// Draws for score and information evaluation.
    pub info_n: usize,
}

pub mod streams {
    pub const ABC: u64 = 1;
    pub const MCEM: u64 = 2;
    pub const NEAR_NOISELESS: u64 = 3;
    pub const SCORE_AT_30: u64 = 4;
    pub const IMPORTANCE: u64 = 5;
    pub const LOUIS: u64 = 6;
}

impl StudyContext {
    pub fn desk(seed: u64) -> Self {
        Self {
            setting: GpSetting::reference(),
            seed,
            abc_n: DESK_ABC_N,
            schedule: McemSchedule::desk(),
            grid_points: dpabc::oracle_gp::DEFAULT_GRID_POINTS,
            is_n: 1_000_000,
            info_n: 1_000_000,
        }
    }

    pub fn from_config(config: &RunConfig) -> Result<Self, CliError> {
        config.require_counting_laplace()?;
        let setting = GpSetting::new(config.alpha, config.beta, config.mechanism.epsilon, config.s_obs)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let n = config.n.unwrap_or(1_000_000);
        Ok(Self {
            setting,
            seed: config.seed,
            abc_n: if config.full_scale && config.abc_n == DESK_ABC_N { FULL_ABC_N } else { config.abc_n },
            schedule: config.mcem_schedule()?,
            grid_points: config.grid_points,
            is_n: n,
            info_n: n,
        })
    }

    pub fn stream(&self, index: u64) -> RngStream {
        RngStream::new(self.seed).child(index)
    }

    pub fn model(&self) -> Result<GammaPoisson, CliError> {
        GammaPoisson::new(self.setting.alpha, self.setting.beta).stage("model")
    }

    pub fn mechanism_at(&self, epsilon: f64) -> Result<(AdditiveMechanism, PrivatizedQuery), CliError> {
        let mech = make_epsilon_laplace(PrivacyBudget::pure(epsilon).stage("mechanism")?, 1.0, 1).stage("mechanism")?;
        let q = PrivatizedQuery::new(vec![self.setting.s_obs], mech.spec()).stage("mechanism")?;
        Ok((mech, q))
    }

    pub fn mechanism(&self) -> Result<(AdditiveMechanism, PrivatizedQuery), CliError> {
        self.mechanism_at(self.setting.epsilon)
    }
}

/// Rejection ABC draws for the posterior comparison.
pub fn run_study_abc(ctx: &StudyContext) -> Result<AbcResult, CliError> {
    let model = ctx.model()?;
    let (mech, q) = ctx.mechanism()?;
    rejection_abc(&model, &q, &mech, ctx.abc_n, ctx.stream(streams::ABC), &AbcOptions::default())
        .stage("rejection ABC")
}

/// Staged MCEM from the schedule's starting point.
pub fn run_study_mcem(ctx: &StudyContext) -> Result<McemTrace, CliError> {
    let model = ctx.model()?;
    let (mech, q) = ctx.mechanism()?;
    let options = McemOptions {
        info_n: Some(ctx.info_n),
        ..McemOptions::default()
    };
    run_mcem(&model, &q, &mech, &ctx.schedule, ctx.stream(streams::MCEM), &options).stage("MCEM")
}

/// Closed-form posterior against the brute-force sum, up to a constant.
pub fn closed_form_equivalence(setting: &GpSetting) -> Result<CriterionReport, CliError> {
    let ratios = CHECK_THETAS
        .iter()
        .map(|&t| Ok((ln_posterior_unnorm_closed(setting, t)? - ln_brute_force_unnorm(setting, t)?).exp()))
        .collect::<dpabc::Result<Vec<f64>>>()
        .stage("posterior oracles")?;
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let cv = sd / mean;
    Ok(CriterionReport::new(
        1,
        "closed-form posterior equals brute-force sum up to a constant",
        cv < 1e-8,
        json!({ "cv": cv, "thetas": CHECK_THETAS }),
        "cv < 1e-8",
    ))
}

/// One-sample KS of the ABC draws against the quadrature posterior, and of
/// the same draws against the naive conjugate posterior.
pub fn abc_exactness(abc: &AbcResult, truth: &DensityGrid, naive: &GammaLaw) -> CriterionReport {
    let n = abc.len();
    let name = "rejection ABC draws are exact; naive conjugate posterior is not";
    let tolerance = "KS(exact) < c(1e-3)/sqrt(n); KS(naive) > 0.05";
    if n < KS_MIN_N {
        return CriterionReport {
            id: 2,
            name: name.into(),
            status: Status::Skipped,
            measured: json!({ "n": n }),
            tolerance: tolerance.into(),
            note: Some(format!("insufficient n (KS needs at least {KS_MIN_N} draws)")),
        };
    }
    let thetas = abc.scalar_thetas();
    let exact = ks_statistic(&thetas, |t| truth.cdf_at(t));
    let naive_ks = ks_statistic(&thetas, |t| naive.cdf(t));
    let critical = ks_critical_value(KS_ALPHA, n);
    CriterionReport::new(
        2,
        name,
        exact < critical && naive_ks > 0.05,
        json!({ "n": n, "ks_exact": exact, "ks_naive": naive_ks, "critical": critical }),
        tolerance,
    )
}

/// MCEM estimate against the target value and the oracle argmax.
pub fn mcem_point_estimate(trace: &McemTrace, setting: &GpSetting) -> Result<CriterionReport, CliError> {
    let oracle = mle_oracle(setting, 1.0, 100.0).stage("likelihood oracle")?;
    let theta = trace.theta_hat[0];
    let passed = trace.converged && (theta - TARGET_MLE).abs() <= 0.05 && (theta - oracle.argmax).abs() <= 0.02;
    Ok(CriterionReport::new(
        3,
        "MCEM estimate",
        passed,
        json!({
            "theta_hat": theta,
            "oracle_argmax": oracle.argmax,
            "iterations": trace.records.len(),
            "converged": trace.converged,
        }),
        "|theta - 37.237| <= 0.05 and |theta - oracle| <= 0.02",
    ))
}

/// Observed information at the MCEM estimate, at the near-noiseless
/// surrogate, and their ratio.
pub fn fisher_information(ctx: &StudyContext, trace: &McemTrace) -> Result<CriterionReport, CliError> {
    let info = trace
        .info_scalar()
        .ok_or_else(|| CliError::Config("trace has no observed information".into()))?;
    let model = ctx.model()?;
    let (mech, q) = ctx.mechanism_at(NEAR_NOISELESS_EPSILON)?;
    let theta = [NOISELESS_MLE];
    let sample = impute(&model, &q, &mech, &theta, ctx.info_n, ctx.stream(streams::NEAR_NOISELESS), 4096)
        .stage("near-noiseless imputation")?;
    let surrogate = observed_information(&sample, &model, &theta).stage("near-noiseless information")?[(0, 0)];
    let excess = surrogate / info - 1.0;
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    let passed = rel(info, TARGET_INFO) <= 0.05
        && rel(surrogate, 1.0 / NOISELESS_MLE) <= 0.05
        && (excess - TARGET_INFO_EXCESS).abs() <= 0.05;
    Ok(CriterionReport::new(
        4,
        "observed Fisher information",
        passed,
        json!({
            "info_at_theta_hat": info,
            "info_near_noiseless": surrogate,
            "excess": excess,
        }),
        "info within 5% of 1.582e-2; surrogate within 5% of 1/37.4; excess 0.69 +- 0.05",
    ))
}

/// Observed score at the MCEM estimate and at `theta = 30`.
pub fn score_sanity(ctx: &StudyContext, trace: &McemTrace) -> Result<CriterionReport, CliError> {
    let at_hat = trace
        .observed_score
        .as_ref()
        .ok_or_else(|| CliError::Config("trace has no observed score".into()))?;
    let model = ctx.model()?;
    let (mech, q) = ctx.mechanism()?;
    let theta = [30.0];
    let sample = impute(&model, &q, &mech, &theta, ctx.info_n, ctx.stream(streams::SCORE_AT_30), 4096)
        .stage("score imputation")?;
    let at_30 = observed_score(&sample, &model, &theta).stage("observed score")?;
    let derivative = marginal_loglik(&ctx.setting, 30.0).stage("likelihood oracle")?.first_derivative;
    // central-difference error of the oracle derivative is far below 1e-6
    let passed = at_hat.value[0].abs() <= 3.0 * at_hat.std_error[0]
        && (at_30.value[0] - derivative).abs() <= 3.0 * at_30.std_error[0] + 1e-6;
    Ok(CriterionReport::new(
        5,
        "observed score",
        passed,
        json!({
            "score_at_theta_hat": at_hat.value[0],
            "se_at_theta_hat": at_hat.std_error[0],
            "score_at_30": at_30.value[0],
            "se_at_30": at_30.std_error[0],
            "oracle_derivative_at_30": derivative,
        }),
        "|score(theta_hat)| <= 3 SE; |score(30) - oracle| <= 3 SE + 1e-6",
    ))
}

/// Density-ratio bound of the epsilon-Laplace counting mechanism.
pub fn dp_bound() -> Result<CriterionReport, CliError> {
    // dyadic spacing keeps `t - 1` exact at every grid point
    let grid: Vec<f64> = (-1280..=1280).map(|i| i as f64 / 64.0).collect();
    let mut rows = Vec::new();
    let mut passed = true;
    for eps in DP_EPSILONS {
        let mech = make_epsilon_laplace(PrivacyBudget::pure(eps).stage("mechanism")?, 1.0, 1).stage("mechanism")?;
        let check = verify_dp_bound(&mech, 1.0, &grid);
        let gap = (check.max_ratio - eps.exp()).abs();
        passed &= check.passed && gap <= 1e-12;
        rows.push(json!({ "epsilon": eps, "max_ratio": check.max_ratio, "gap": gap }));
    }
    Ok(CriterionReport::new(
        6,
        "epsilon-Laplace density ratio bound",
        passed,
        Value::Array(rows),
        "max ratio = e^eps +- 1e-12",
    ))
}

/// Importance ABC posterior mean and its invariance to weight scaling.
pub fn importance_consistency(ctx: &StudyContext, truth: &DensityGrid) -> Result<CriterionReport, CliError> {
    let model = ctx.model()?;
    let (mech, q) = ctx.mechanism()?;
    let ws = importance_abc(&model, &q, &mech, &PriorProposal::new(&model), ctx.is_n, ctx.stream(streams::IMPORTANCE), 4096)
        .stage("importance ABC")?;
    let est = weighted_estimate(&ws, |t| t[0]).stage("importance estimate")?;
    let target = truth.mean();
    let mut worst: f64 = 0.0;
    for factor in [1e-30, 0.37, 1e30] {
        let e = weighted_estimate(&ws.rescaled(factor), |t| t[0]).stage("importance estimate")?;
        worst = worst.max(((e.value - est.value) / est.value).abs());
    }
    let passed = (est.value - target).abs() <= 3.0 * est.std_error && worst <= 1e-12;
    Ok(CriterionReport::new(
        7,
        "importance ABC consistency",
        passed,
        json!({
            "estimate": est.value,
            "std_error": est.std_error,
            "ess": est.ess,
            "quadrature_mean": target,
            "rescaling_rel_change": worst,
        }),
        "|estimate - quadrature| <= 3 SE; rescaling change <= 1e-12",
    ))
}

/// Empirical acceptance rate against evidence divided by the kernel mode.
pub fn acceptance_rate_identity(ctx: &StudyContext, abc: &AbcResult) -> Result<CriterionReport, CliError> {
    let (mech, _) = ctx.mechanism()?;
    let ev = evidence(&ctx.setting, ctx.grid_points).stage("evidence quadrature")?;
    let theory = acceptance_rate_from_density(ev, &mech);
    let se = (theory * (1.0 - theory) / abc.attempts as f64).sqrt();
    let passed = (abc.acceptance_rate - theory).abs() <= 3.0 * se;
    Ok(CriterionReport::new(
        8,
        "acceptance-rate identity",
        passed,
        json!({
            "empirical": abc.acceptance_rate,
            "theoretical": theory,
            "binomial_se": se,
            "attempts": abc.attempts,
            "evidence": ev,
        }),
        "|empirical - theoretical| <= 3 binomial SE",
    ))
}

/// Linear-time information formula against its literal double sum.
pub fn outer_product_factorization(ctx: &StudyContext) -> Result<CriterionReport, CliError> {
    let model = ctx.model()?;
    let (mech, q) = ctx.mechanism()?;
    let theta = [TARGET_MLE];
    let sample = impute(&model, &q, &mech, &theta, 100, ctx.stream(streams::LOUIS), 4096).stage("imputation")?;
    let fast = observed_information(&sample, &model, &theta).stage("information")?[(0, 0)];
    let literal = observed_information_literal(&sample, &model, &theta).stage("information")?[(0, 0)];
    let rel = ((fast - literal) / literal).abs();
    Ok(CriterionReport::new(
        9,
        "outer-product factorization of the information double sum",
        rel <= 1e-12,
        json!({ "fast": fast, "literal": literal, "rel_diff": rel }),
        "relative difference <= 1e-12 at N = 100",
    ))
}

/// Determinism cannot be judged from inside a single run.
pub fn determinism_placeholder() -> CriterionReport {
    CriterionReport {
        id: 10,
        name: "byte-identical reruns".into(),
        status: Status::Skipped,
        measured: Value::Null,
        tolerance: "two runs with one seed produce identical directories".into(),
        note: Some("judged by comparing two output directories".into()),
    }
}
