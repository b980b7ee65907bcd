//! Monte Carlo EM for likelihood inference from a privatized query.
//!
//! The E-step imputes the latent noiseless query by importance sampling:
//! `s_i ~ pi(s | theta_t)` with weights `w_i = eta_obs(s_obs | s_i)`. The
//! M-step either applies a model's closed-form complete-data maximizer to the
//! weighted mean of the sufficient statistic, or maximizes the weighted
//! complete-data log likelihood numerically.
//!
//! Every iteration of a stage reuses that stage's random substream, so the
//! stage's E-step is a deterministic function of `theta` and the fixed-point
//! iteration can meet tight tolerances without Monte Carlo jitter.
//!
//! Weights are kept relative to their largest value, with the log of that
//! value stored separately, so sums never underflow.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abc::{weighted_mean, DEFAULT_CHUNK_SIZE};
use crate::error::{Error, Result};
use crate::mechanisms::AdditiveMechanism;
use crate::model::{BayesModel, PrivatizedQuery};
use crate::optim::{decreasing_root, maximize_bracketed, polish_maximum};
use crate::rngkit::RngStream;

/// Simulated latent queries with their importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputedSample {
    /// Row-major `n x stat_dim` draws.
    pub draws: Vec<f64>,
    pub stat_dim: usize,
    /// Weights divided by the largest weight.
    pub weights: Vec<f64>,
    /// Log of the largest weight.
    pub log_scale: f64,
}

impl ImputedSample {
    pub fn new(draws: Vec<f64>, stat_dim: usize, weights: Vec<f64>) -> Result<Self> {
        if stat_dim == 0 || draws.len() != stat_dim * weights.len() {
            return Err(Error::Shape {
                expected: stat_dim * weights.len(),
                got: draws.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Numeric("weights must be finite and nonnegative".into()));
        }
        let peak = weights.iter().copied().fold(0.0f64, f64::max);
        if peak <= 0.0 {
            return Err(Error::DegenerateWeights);
        }
        Ok(Self {
            draws,
            stat_dim,
            weights: weights.iter().map(|w| w / peak).collect(),
            log_scale: peak.ln(),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.draws[i * self.stat_dim..(i + 1) * self.stat_dim]
    }

    /// `sum_i w_i` on the absolute scale.
    pub fn sum_weights(&self) -> f64 {
        self.weights.iter().sum::<f64>() * self.log_scale.exp()
    }

    /// Empirical effective sample size `(sum w)^2 / sum w^2`.
    pub fn ess(&self) -> f64 {
        let s: f64 = self.weights.iter().sum();
        let s2: f64 = self.weights.iter().map(|w| w * w).sum();
        s * s / s2
    }

    /// Same draws with every weight multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> Self {
        Self {
            draws: self.draws.clone(),
            stat_dim: self.stat_dim,
            weights: self.weights.clone(),
            log_scale: self.log_scale + factor.ln(),
        }
    }
}

fn check_mechanism<M: BayesModel + ?Sized>(
    model: &M,
    q: &PrivatizedQuery,
    mech: &AdditiveMechanism,
) -> Result<()> {
    if mech.spec() != q.mechanism {
        return Err(Error::MechanismMismatch {
            query: q.mechanism.to_string(),
            sampler: mech.spec().to_string(),
        });
    }
    if q.dimension() != model.stat_dim() {
        return Err(Error::Shape {
            expected: model.stat_dim(),
            got: q.dimension(),
        });
    }
    Ok(())
}

/// Draws `n` latent queries at `theta` on chunked substreams of `stream` and
/// weights them by the proper observation density.
pub fn impute<M: BayesModel + ?Sized>(
    model: &M,
    q: &PrivatizedQuery,
    mech: &AdditiveMechanism,
    theta: &[f64],
    n: usize,
    stream: RngStream,
    chunk_size: usize,
) -> Result<ImputedSample> {
    check_mechanism(model, q, mech)?;
    if n == 0 || chunk_size == 0 {
        return Err(Error::InvalidDimension("sample and chunk sizes must be positive".into()));
    }
    let s_obs = q.value.as_slice();
    let chunks = n.div_ceil(chunk_size);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<(Vec<f64>, Vec<f64>)> {
            let size = chunk_size.min(n - c * chunk_size);
            let mut rng = stream.child(c as u64).rng();
            let rng: &mut dyn RngCore = &mut rng;
            let draws = model.simulate_batch(theta, size, rng)?;
            let log_w = draws
                .chunks(model.stat_dim())
                .map(|s| mech.log_obs_density(s_obs, s))
                .collect();
            Ok((draws, log_w))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut draws = Vec::with_capacity(n * model.stat_dim());
    let mut log_w = Vec::with_capacity(n);
    for (d, w) in parts {
        draws.extend(d);
        log_w.extend(w);
    }
    let peak = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY || peak.is_nan() {
        return Err(Error::DegenerateWeights);
    }
    Ok(ImputedSample {
        draws,
        stat_dim: model.stat_dim(),
        weights: log_w.iter().map(|l| (l - peak).exp()).collect(),
        log_scale: peak,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EStep {
    /// Weighted mean of the sufficient statistic.
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    pub sum_weights: f64,
    pub ess: f64,
}

/// Weighted mean of `b(s)` over an imputed sample.
pub fn expected_statistic<M: BayesModel + ?Sized>(model: &M, sample: &ImputedSample) -> Result<EStep> {
    let stats = (0..sample.len())
        .map(|i| {
            model
                .sufficient_stat(sample.draw(i))
                .ok_or(Error::MissingCapability("sufficient_stat"))
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let dim = stats.first().map_or(0, Vec::len);
    let mut estimate = Vec::with_capacity(dim);
    let mut std_error = Vec::with_capacity(dim);
    let mut ess = sample.ess();
    for j in 0..dim {
        let column: Vec<f64> = stats.iter().map(|b| b[j]).collect();
        let e = weighted_mean(&sample.weights, &column)?;
        estimate.push(e.value);
        std_error.push(e.std_error);
        ess = e.ess;
    }
    Ok(EStep {
        estimate,
        std_error,
        sum_weights: sample.sum_weights(),
        ess,
    })
}

/// Importance-sampled E-step at `theta_t`.
pub fn e_step_is<M: BayesModel + ?Sized>(
    model: &M,
    q: &PrivatizedQuery,
    mech: &AdditiveMechanism,
    theta_t: &[f64],
    n: usize,
    stream: RngStream,
) -> Result<EStep> {
    if model.sufficient_stat(&q.value).is_none() {
        return Err(Error::MissingCapability("sufficient_stat"));
    }
    let sample = impute(model, q, mech, theta_t, n, stream, DEFAULT_CHUNK_SIZE)?;
    expected_statistic(model, &sample)
}

/// Poisson complete-data maximizer: `theta = E(s)`.
pub fn m_step_exact_poisson(e_estimate: f64) -> Result<f64> {
    if !(e_estimate > 0.0 && e_estimate.is_finite()) {
        return Err(Error::Domain(format!(
            "Poisson M-step needs a positive expected count, got {e_estimate}"
        )));
    }
    Ok(e_estimate)
}

/// Tolerance of the numeric M-step in `theta`.
pub const M_STEP_TOLERANCE: f64 = 1e-10;

/// Maximizes `sum_i w_i ln pi(s_i | theta)` over scalar `theta`: a root of
/// the weighted score when the model supplies one, otherwise golden section
/// on the weighted log likelihood.
pub fn m_step_generic<M: BayesModel + ?Sized>(
    sample: &ImputedSample,
    model: &M,
    bracket: (f64, f64),
) -> Result<Vec<f64>> {
    if model.param_dim() != 1 {
        return Err(Error::InvalidDimension(
            "the numeric M-step handles scalar parameters only".into(),
        ));
    }
    let (lo, hi) = bracket;
    let n = sample.len();
    let has_score = model.score(sample.draw(0), &[0.5 * (lo + hi)]).is_some();
    let theta = if has_score {
        let g = |t: f64| -> f64 {
            let mut acc = 0.0;
            for i in 0..n {
                let w = sample.weights[i];
                if w > 0.0 {
                    acc += w * model.score(sample.draw(i), &[t]).map_or(f64::NAN, |l| l[0]);
                }
            }
            acc
        };
        decreasing_root(g, lo, hi, M_STEP_TOLERANCE)?
    } else {
        if model.likelihood_log_density(sample.draw(0), &[0.5 * (lo + hi)]).is_none() {
            return Err(Error::MissingCapability("likelihood_log_density"));
        }
        let total: f64 = sample.weights.iter().sum();
        let q_hat = |t: f64| -> f64 {
            let mut acc = 0.0;
            for i in 0..n {
                let w = sample.weights[i] / total;
                if w > 0.0 {
                    acc += w * model
                        .likelihood_log_density(sample.draw(i), &[t])
                        .unwrap_or(f64::NAN);
                }
            }
            if acc.is_nan() {
                f64::NEG_INFINITY
            } else {
                acc
            }
        };
        let rough = maximize_bracketed(q_hat, lo, hi, M_STEP_TOLERANCE)?;
        polish_maximum(q_hat, rough)
    };
    Ok(vec![theta])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McemStage {
    pub tolerance: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McemSchedule {
    pub stages: Vec<McemStage>,
    pub theta_init: Vec<f64>,
}

impl McemSchedule {
    pub fn new(stages: Vec<McemStage>, theta_init: Vec<f64>) -> Result<Self> {
        let schedule = Self { stages, theta_init };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Tolerances 1e-3, 1e-4, 1e-5 with 1e3, 1e5, 1e6 draws, from `theta = 1`.
    pub fn desk() -> Self {
        Self::from_pairs(&[(1e-3, 1_000), (1e-4, 100_000), (1e-5, 1_000_000)])
    }

    /// As [`desk`](Self::desk) with 1e7 draws in the final stage.
    pub fn full() -> Self {
        Self::from_pairs(&[(1e-3, 1_000), (1e-4, 100_000), (1e-5, 10_000_000)])
    }

    fn from_pairs(pairs: &[(f64, usize)]) -> Self {
        Self {
            stages: pairs
                .iter()
                .map(|&(tolerance, n)| McemStage { tolerance, n })
                .collect(),
            theta_init: vec![1.0],
        }
    }

    pub fn with_theta_init(mut self, theta_init: Vec<f64>) -> Self {
        self.theta_init = theta_init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Domain("schedule needs at least one stage".into()));
        }
        if self.theta_init.is_empty() || self.theta_init.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain("initial theta must be finite and nonempty".into()));
        }
        for (k, st) in self.stages.iter().enumerate() {
            if !(st.tolerance > 0.0 && st.tolerance.is_finite()) || st.n == 0 {
                return Err(Error::Domain(format!("stage {k} needs tolerance > 0 and n > 0")));
            }
            if k > 0 {
                let prev = self.stages[k - 1];
                if st.tolerance >= prev.tolerance {
                    return Err(Error::Domain("stage tolerances must strictly decrease".into()));
                }
                if st.n < prev.n {
                    return Err(Error::Domain("stage sizes must not decrease".into()));
                }
            }
        }
        Ok(())
    }

    pub fn final_tolerance(&self) -> f64 {
        self.stages.last().map_or(f64::NAN, |s| s.tolerance)
    }
}

impl fmt::Display for McemSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|s| format!("{:e}:{}", s.tolerance, s.n))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `tol:n,tol:n,...`, starting from `theta = 1`.
impl FromStr for McemSchedule {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let stages = text
            .split(',')
            .map(|part| {
                let (tol, n) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Domain(format!("stage `{part}` is not tol:n")))?;
                let tolerance: f64 = tol
                    .trim()
                    .parse()
                    .map_err(|_| Error::Domain(format!("bad tolerance `{tol}`")))?;
                let n: f64 = n
                    .trim()
                    .parse()
                    .map_err(|_| Error::Domain(format!("bad sample size `{n}`")))?;
                if !(n >= 1.0 && n.fract() == 0.0 && n <= usize::MAX as f64) {
                    return Err(Error::Domain(format!("sample size `{n}` is not a positive integer")));
                }
                Ok(McemStage {
                    tolerance,
                    n: n as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stages, vec![1.0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McemOptions {
    /// Iteration cap per stage.
    pub max_iterations: usize,
    /// `theta_{t+1} = theta_t + damping (M(theta_t) - theta_t)`.
    pub damping: f64,
    pub chunk_size: usize,
    /// Starting bracket of the numeric M-step.
    pub bracket: (f64, f64),
    /// Draws for the final score and information evaluation; `None` uses
    /// the last stage's size.
    pub info_n: Option<usize>,
}

impl Default for McemOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            damping: 1.0,
            chunk_size: DEFAULT_CHUNK_SIZE,
            bracket: (1e-3, 1e3),
            info_n: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Iteration number across all stages, starting at 1.
    pub t: usize,
    pub stage: usize,
    /// Parameter after this iteration's M-step.
    pub theta: Vec<f64>,
    /// E-step estimate of the sufficient statistic (empty on the generic path).
    pub e_estimate: Vec<f64>,
    pub ess: f64,
    pub n: usize,
    /// Largest absolute coordinate change.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McemTrace {
    pub records: Vec<IterationRecord>,
    pub theta_hat: Vec<f64>,
    pub observed_info: Option<Vec<Vec<f64>>>,
    pub observed_score: Option<ScoreEstimate>,
    pub converged: bool,
    pub stream: RngStream,
}

impl McemTrace {
    /// Scalar observed information, when available.
    pub fn info_scalar(&self) -> Option<f64> {
        self.observed_info.as_ref().map(|m| m[0][0])
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Staged MCEM. Each stage iterates E and M steps until successive iterates
/// differ by less than the stage tolerance, then hands its last iterate to
/// the next stage. After the last stage, the observed score and information
/// are evaluated at the estimate on the final stage's substream.
pub fn run_mcem<M: BayesModel + ?Sized>(
    model: &M,
    q: &PrivatizedQuery,
    mech: &AdditiveMechanism,
    schedule: &McemSchedule,
    stream: RngStream,
    options: &McemOptions,
) -> Result<McemTrace> {
    schedule.validate()?;
    check_mechanism(model, q, mech)?;
    if schedule.theta_init.len() != model.param_dim() {
        return Err(Error::Shape {
            expected: model.param_dim(),
            got: schedule.theta_init.len(),
        });
    }
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return Err(Error::Domain(format!("damping must lie in (0, 1], got {}", options.damping)));
    }
    let closed_form = model.sufficient_stat(&q.value).is_some()
        && model.complete_data_mle(&q.value).is_some();

    let mut theta = schedule.theta_init.clone();
    let mut records = Vec::new();
    let mut t = 0;
    for (k, stage) in schedule.stages.iter().enumerate() {
        let stage_stream = stream.child(k as u64);
        let mut converged = false;
        for _ in 0..options.max_iterations {
            t += 1;
            let sample = impute(model, q, mech, &theta, stage.n, stage_stream, options.chunk_size)?;
            let (proposal, e_estimate, ess) = if closed_form {
                let e = expected_statistic(model, &sample)?;
                let next = model
                    .complete_data_mle(&e.estimate)
                    .ok_or(Error::MissingCapability("complete_data_mle"))??;
                (next, e.estimate, e.ess)
            } else {
                let next = m_step_generic(&sample, model, options.bracket)?;
                (next, Vec::new(), sample.ess())
            };
            let next: Vec<f64> = theta
                .iter()
                .zip(&proposal)
                .map(|(old, new)| old + options.damping * (new - old))
                .collect();
            let delta = max_abs_diff(&next, &theta);
            theta = next;
            records.push(IterationRecord {
                t,
                stage: k,
                theta: theta.clone(),
                e_estimate,
                ess,
                n: stage.n,
                delta,
            });
            if delta < stage.tolerance {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence {
                stage: k,
                iterations: options.max_iterations,
                trace: Box::new(McemTrace {
                    records,
                    theta_hat: theta,
                    observed_info: None,
                    observed_score: None,
                    converged: false,
                    stream,
                }),
            });
        }
    }

    let last = schedule.stages.len() - 1;
    let info_n = options.info_n.unwrap_or(schedule.stages[last].n);
    let sample = impute(model, q, mech, &theta, info_n, stream.child(last as u64), options.chunk_size)?;
    let observed_score = match observed_score(&sample, model, &theta) {
        Ok(s) => Some(s),
        Err(Error::MissingCapability(_)) => None,
        Err(e) => return Err(e),
    };
    let observed_info = match observed_information(&sample, model, &theta) {
        Ok(m) => Some(
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect(),
        ),
        Err(Error::MissingCapability(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(McemTrace {
        records,
        theta_hat: theta,
        observed_info,
        observed_score,
        converged: true,
        stream,
    })
}

/// `N pi(s_obs | theta)^2 / E(eta_obs^2)`, both in proper-density units.
pub fn ess_theoretical(evidence_at_theta: f64, second_moment_eta: f64, n: usize) -> Result<f64> {
    if !(second_moment_eta > 0.0 && second_moment_eta.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    if !(evidence_at_theta >= 0.0 && evidence_at_theta.is_finite()) {
        return Err(Error::Domain(format!("evidence must be nonnegative, got {evidence_at_theta}")));
    }
    Ok(n as f64 * evidence_at_theta * evidence_at_theta / second_moment_eta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEstimate {
    pub value: Vec<f64>,
    pub std_error: Vec<f64>,
}

fn scores<M: BayesModel + ?Sized>(sample: &ImputedSample, model: &M, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..sample.len())
        .map(|i| {
            model
                .score(sample.draw(i), theta)
                .ok_or(Error::MissingCapability("score"))
        })
        .collect()
}

/// Observed score: the weighted mean of complete-data scores.
pub fn observed_score<M: BayesModel + ?Sized>(
    sample: &ImputedSample,
    model: &M,
    theta: &[f64],
) -> Result<ScoreEstimate> {
    let lambda = scores(sample, model, theta)?;
    let mut value = Vec::with_capacity(theta.len());
    let mut std_error = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let column: Vec<f64> = lambda.iter().map(|l| l[j]).collect();
        let e = weighted_mean(&sample.weights, &column)?;
        value.push(e.value);
        std_error.push(e.std_error);
    }
    Ok(ScoreEstimate { value, std_error })
}

fn normalized_weights(sample: &ImputedSample) -> Result<Vec<f64>> {
    let total: f64 = sample.weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    Ok(sample.weights.iter().map(|w| w / total).collect())
}

/// Observed information by the missing-information identity:
/// `m sum w_i (-J_i - l_i l_i^T) + (m sum w_i l_i)(m sum w_i l_i)^T`,
/// with `m = 1 / sum w`. Linear in the sample size.
pub fn observed_information<M: BayesModel + ?Sized>(
    sample: &ImputedSample,
    model: &M,
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let w = normalized_weights(sample)?;
    let d = theta.len();
    let mut curvature = DMatrix::<f64>::zeros(d, d);
    let mut mean_score = DVector::<f64>::zeros(d);
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        let s = sample.draw(i);
        let l = DVector::from_vec(model.score(s, theta).ok_or(Error::MissingCapability("score"))?);
        let j = model
            .score_jacobian(s, theta)
            .ok_or(Error::MissingCapability("score_jacobian"))?;
        curvature -= (j + &l * l.transpose()) * wi;
        mean_score += l * wi;
    }
    let info = curvature + &mean_score * mean_score.transpose();
    Ok((&info + info.transpose()) * 0.5)
}

/// The information formula with its double sum written out term by term.
/// Quadratic in the sample size; kept as a reference for the fast path.
pub fn observed_information_literal<M: BayesModel + ?Sized>(
    sample: &ImputedSample,
    model: &M,
    theta: &[f64],
) -> Result<DMatrix<f64>> {
    let w = normalized_weights(sample)?;
    let d = theta.len();
    let n = sample.len();
    let lambda: Vec<DVector<f64>> = scores(sample, model, theta)?
        .into_iter()
        .map(DVector::from_vec)
        .collect();
    let mut info = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        let j = model
            .score_jacobian(sample.draw(i), theta)
            .ok_or(Error::MissingCapability("score_jacobian"))?;
        info -= (j + &lambda[i] * lambda[i].transpose()) * w[i];
    }
    for i in 0..n {
        for k in 0..n {
            info += &lambda[i] * lambda[k].transpose() * (w[i] * w[k]);
        }
    }
    Ok(info)
}
