//! One function per experiment. Each writes its resolved configuration and
//! its results into the output directory.

use dpabc::abc::{importance_abc, rejection_abc, weighted_estimate, AbcOptions, AbcResult, PriorProposal};
use dpabc::mcem::{run_mcem, McemOptions, McemTrace};
use dpabc::mechanisms::AdditiveMechanism;
use dpabc::model::{GammaPoisson, PrivatizedQuery};
use dpabc::oracle_gp::{default_grid_bounds, mle_oracle, naive_conjugate_posterior, posterior_comparison, GpSetting, PosteriorComparison};
use dpabc::rngkit::RngStream;
use dpabc::Error as CoreError;
use serde_json::json;

use crate::config::{Experiment, RunConfig};
use crate::criteria::{self, CriterionReport, StudyContext, Status};
use crate::error::{CliError, Stage};
use crate::output::{fmt_f64, OutputDir};

pub const DEFAULT_ABC_N: usize = 10_000;
pub const DEFAULT_IS_N: usize = 100_000;

/// What a run produced, for callers that want more than the files.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub files: Vec<String>,
    pub criteria: Vec<CriterionReport>,
}

impl RunReport {
    fn record(&mut self, path: std::path::PathBuf) {
        self.files.push(path.display().to_string());
    }
}

pub fn execute(config: &RunConfig) -> Result<RunReport, CliError> {
    config.validate()?;
    let out = OutputDir::create(&config.out)?;
    let mut report = RunReport::default();
    report.record(out.write_json("config.json", config)?);
    match config.experiment {
        Experiment::Privatize => cmd_privatize(config, &out, &mut report)?,
        Experiment::Abc => cmd_abc(config, &out, &mut report)?,
        Experiment::AbcIs => cmd_abc_is(config, &out, &mut report)?,
        Experiment::Mcem => cmd_mcem(config, &out, &mut report)?,
        Experiment::Posterior => cmd_posterior(config, &out, &mut report)?,
        Experiment::MleOracle => cmd_mle_oracle(config, &out, &mut report)?,
        Experiment::ReproducePaper => cmd_reproduce_paper(config, &out, &mut report)?,
    }
    Ok(report)
}

fn mechanism_and_query(config: &RunConfig) -> Result<(GammaPoisson, AdditiveMechanism, PrivatizedQuery), CliError> {
    let model = GammaPoisson::new(config.alpha, config.beta).map_err(|e| CliError::Config(e.to_string()))?;
    let mech = config.mechanism.build().map_err(|e| CliError::Config(e.to_string()))?;
    let q = PrivatizedQuery::new(vec![config.s_obs], mech.spec()).map_err(|e| CliError::Config(e.to_string()))?;
    Ok((model, mech, q))
}

fn setting(config: &RunConfig) -> Result<GpSetting, CliError> {
    config.require_counting_laplace()?;
    GpSetting::new(config.alpha, config.beta, config.mechanism.epsilon, config.s_obs)
        .map_err(|e| CliError::Config(e.to_string()))
}

pub fn cmd_privatize(config: &RunConfig, out: &OutputDir, report: &mut RunReport) -> Result<(), CliError> {
    let s = config
        .s
        .ok_or_else(|| CliError::Config("privatize needs the raw query value (--s)".into()))?;
    if !s.is_finite() {
        return Err(CliError::Config(format!("raw query must be finite, got {s}")));
    }
    let mech = config.mechanism.build().map_err(|e| CliError::Config(e.to_string()))?;
    let mut rng = RngStream::new(config.seed).rng();
    let s_obs = mech.perturb(&[s], &mut rng).stage("privatize")?[0];
    report.record(out.write_json(
        "privatize.json",
        &json!({ "s": s, "s_obs": s_obs, "mechanism": mech.spec(), "seed": config.seed }),
    )?);
    Ok(())
}

fn write_abc(out: &OutputDir, abc: &AbcResult, mech: &AdditiveMechanism, seed: u64, report: &mut RunReport) -> Result<(), CliError> {
    report.record(out.write_csv(
        "abc.csv",
        &["theta", "chunk", "index"],
        abc.draws
            .iter()
            .map(|d| vec![fmt_f64(d.theta[0]), d.chunk.to_string(), d.index.to_string()]),
    )?);
    report.record(out.write_json(
        "abc.json",
        &json!({
            "mechanism": mech.spec(),
            "n": abc.len(),
            "attempts": abc.attempts,
            "acceptance_rate": abc.acceptance_rate,
            "seed": seed,
            "stream": abc.stream,
            "chunk_size": abc.chunk_size,
        }),
    )?);
    Ok(())
}

pub fn cmd_abc(config: &RunConfig, out: &OutputDir, report: &mut RunReport) -> Result<(), CliError> {
    let (model, mech, q) = mechanism_and_query(config)?;
    let n = config.n.unwrap_or(DEFAULT_ABC_N);
    let abc = rejection_abc(&model, &q, &mech, n, RngStream::new(config.seed), &AbcOptions::default())
        .stage("rejection ABC")?;
    write_abc(out, &abc, &mech, config.seed, report)
}

pub fn cmd_abc_is(config: &RunConfig, out: &OutputDir, report: &mut RunReport) -> Result<(), CliError> {
    let (model, mech, q) = mechanism_and_query(config)?;
    let n = config.n.unwrap_or(DEFAULT_IS_N);
    let ws = importance_abc(&model, &q, &mech, &PriorProposal::new(&model), n, RngStream::new(config.seed), 4096)
        .stage("importance ABC")?;
    let est = weighted_estimate(&ws, |t| t[0]).stage("importance estimate")?;
    report.record(out.write_csv(
        "abc_is.csv",
        &["theta", "weight"],
        ws.thetas
            .iter()
            .zip(&ws.weights)
            .map(|(t, w)| vec![fmt_f64(t[0]), fmt_f64(*w)]),
    )?);
    report.record(out.write_json(
        "abc_is.json",
        &json!({
            "mechanism": mech.spec(),
            "n": n,
            "proposal": ws.proposal,
            "posterior_mean": est.value,
            "std_error": est.std_error,
            "ess": est.ess,
            "seed": config.seed,
        }),
    )?);
    Ok(())
}

fn write_trace(out: &OutputDir, trace: &McemTrace, config: &RunConfig, schedule: &str, report: &mut RunReport) -> Result<(), CliError> {
    report.record(out.write_csv(
        "mcem_trace.csv",
        &["t", "theta", "e_estimate", "ess", "n", "delta"],
        trace.records.iter().map(|r| {
            vec![
                r.t.to_string(),
                fmt_f64(r.theta[0]),
                r.e_estimate.first().map_or_else(String::new, |e| fmt_f64(*e)),
                fmt_f64(r.ess),
                r.n.to_string(),
                fmt_f64(r.delta),
            ]
        }),
    )?);
    report.record(out.write_json(
        "mcem.json",
        &json!({
            "theta_hat": trace.theta_hat,
            "observed_info": trace.observed_info,
            "observed_score": trace.observed_score,
            "converged": trace.converged,
            "iterations": trace.records.len(),
            "seed": config.seed,
            "schedule": schedule,
        }),
    )?);
    Ok(())
}

pub fn cmd_mcem(config: &RunConfig, out: &OutputDir, report: &mut RunReport) -> Result<(), CliError> {
    let (model, mech, q) = mechanism_and_query(config)?;
    let schedule = config.mcem_schedule()?;
    let options = McemOptions {
        info_n: config.n,
        ..McemOptions::default()
    };
    match run_mcem(&model, &q, &mech, &schedule, RngStream::new(config.seed), &options) {
        Ok(trace) => write_trace(out, &trace, config, &schedule.to_string(), report),
        Err(CoreError::NonConvergence { stage, iterations, trace }) => {
            write_trace(out, &trace, config, &schedule.to_string(), report)?;
            Err(CliError::Core {
                stage: "MCEM",
                source: CoreError::NonConvergence { stage, iterations, trace },
            })
        }
        Err(e) => Err(CliError::Core { stage: "MCEM", source: e }),
    }
}

fn write_posterior_grid(out: &OutputDir, name: &str, setting: &GpSetting, fig: &PosteriorComparison, report: &mut RunReport) -> Result<(), CliError> {
    report.record(out.write_csv(
        &format!("{name}.csv"),
        &["theta", "prior", "naive", "true_posterior"],
        (0..fig.prior.theta.len()).map(|i| {
            vec![
                fmt_f64(fig.prior.theta[i]),
                fmt_f64(fig.prior.values[i]),
                fmt_f64(fig.naive.values[i]),
                fmt_f64(fig.true_posterior.values[i]),
            ]
        }),
    )?);
    let (lo, hi) = default_grid_bounds(setting);
    let moments = |g: &dpabc::oracle_gp::DensityGrid| json!({ "mean": g.mean(), "variance": g.variance(), "integral": g.integral() });
    report.record(out.write_json(
        &format!("{name}.json"),
        &json!({
            "setting": setting,
            "grid": { "lo": lo, "hi": hi, "points": fig.prior.theta.len() },
            "naive_law": naive_conjugate_posterior(setting).stage("naive posterior")?,
            "prior": moments(&fig.prior),
            "naive": moments(&fig.naive),
            "true_posterior": moments(&fig.true_posterior),
        }),
    )?);
    Ok(())
}

pub fn cmd_posterior(config: &RunConfig, out: &OutputDir, report: &mut RunReport) -> Result<(), CliError> {
    let setting = setting(config)?;
    let fig = posterior_comparison(&setting, config.grid_points).stage("posterior grid")?;
    write_posterior_grid(out, "posterior", &setting, &fig, report)
}

pub fn cmd_mle_oracle(config: &RunConfig, out: &OutputDir, report: &mut RunReport) -> Result<(), CliError> {
    let setting = setting(config)?;
    let oracle = mle_oracle(&setting, 1.0, 100.0).stage("likelihood oracle")?;
    report.record(out.write_json(
        "mle_oracle.json",
        &json!({
            "argmax": oracle.argmax,
            "neg_second_derivative": oracle.neg_second_derivative,
            "setting": setting,
        }),
    )?);
    Ok(())
}

pub fn cmd_reproduce_paper(config: &RunConfig, out: &OutputDir, report: &mut RunReport) -> Result<(), CliError> {
    let ctx = StudyContext::from_config(config)?;
    let setting = ctx.setting;
    let (mech, _) = ctx.mechanism()?;

    let fig = posterior_comparison(&setting, ctx.grid_points).stage("posterior grid")?;
    write_posterior_grid(out, "posterior", &setting, &fig, report)?;

    let abc = criteria::run_study_abc(&ctx)?;
    write_abc(out, &abc, &mech, ctx.seed, report)?;

    let trace = criteria::run_study_mcem(&ctx)?;
    write_trace(out, &trace, config, &ctx.schedule.to_string(), report)?;

    let naive = naive_conjugate_posterior(&setting).stage("naive posterior")?;
    let reports = vec![
        criteria::closed_form_equivalence(&setting)?,
        criteria::abc_exactness(&abc, &fig.true_posterior, &naive),
        criteria::mcem_point_estimate(&trace, &setting)?,
        criteria::fisher_information(&ctx, &trace)?,
        criteria::score_sanity(&ctx, &trace)?,
        criteria::dp_bound()?,
        criteria::importance_consistency(&ctx, &fig.true_posterior)?,
        criteria::acceptance_rate_identity(&ctx, &abc)?,
        criteria::outer_product_factorization(&ctx)?,
        criteria::determinism_placeholder(),
    ];
    let all_passed = reports.iter().all(|r| r.status != Status::Fail);
    report.record(out.write_json(
        "summary.json",
        &json!({
            "seed": ctx.seed,
            "setting": setting,
            "schedule": ctx.schedule.to_string(),
            "abc_n": ctx.abc_n,
            "targets": {
                "theta_hat": criteria::TARGET_MLE,
                "observed_info": criteria::TARGET_INFO,
                "noiseless_theta_hat": criteria::NOISELESS_MLE,
                "noiseless_info": criteria::NOISELESS_INFO,
            },
            "results": {
                "theta_hat": trace.theta_hat[0],
                "observed_info": trace.info_scalar(),
                "abc_acceptance_rate": abc.acceptance_rate,
                "posterior_mean": fig.true_posterior.mean(),
            },
            "criteria": reports,
            "all_passed": all_passed,
        }),
    )?);
    report.criteria = reports;
    Ok(())
}
