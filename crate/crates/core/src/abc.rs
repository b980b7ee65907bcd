//! Mechanism-matched ABC samplers.
//!
//! [`rejection_abc`] draws `theta` from the prior, simulates the noiseless
//! query, and accepts with probability `eta((s_obs - s) / h) / max eta`. When
//! the acceptance kernel is the privacy mechanism itself the accepted draws
//! are exact draws from the posterior given the privatized query.
//!
//! Work is split into fixed chunks of accepted draws. Chunk `c` runs on
//! substream `c` of the caller's stream, so a parallel run reproduces the
//! serial one. Within a chunk each attempt consumes randomness in the same
//! order: prior draw, simulation, then exactly one accept/reject uniform.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::{AdditiveMechanism, GeneralMechanism, NoiseKernel};
use crate::model::{BayesModel, PrivatizedQuery};
use crate::rngkit::{open_unit, RngStream};

/// Tolerance for acceptance probabilities above one caused by rounding.
pub const ACCEPTANCE_SLACK: f64 = 1e-12;

pub const DEFAULT_CHUNK_SIZE: usize = 4096;

/// Default attempt budget per requested draw.
pub const DEFAULT_ATTEMPTS_PER_DRAW: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbcOptions {
    /// Accepted draws per chunk.
    pub chunk_size: usize,
    /// Total attempt budget; `None` means `1000 n`.
    pub max_attempts: Option<u64>,
}

impl Default for AbcOptions {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            max_attempts: None,
        }
    }
}

impl AbcOptions {
    pub fn with_max_attempts(mut self, max_attempts: u64) -> Self {
        self.max_attempts = Some(max_attempts);
        self
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbcDraw {
    pub theta: Vec<f64>,
    pub chunk: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbcResult {
    /// Accepted draws ordered by `(chunk, index)`.
    pub draws: Vec<AbcDraw>,
    pub attempts: u64,
    pub acceptance_rate: f64,
    pub stream: RngStream,
    pub chunk_size: usize,
}

impl AbcResult {
    pub fn thetas(&self) -> Vec<Vec<f64>> {
        self.draws.iter().map(|d| d.theta.clone()).collect()
    }

    /// First coordinate of every draw.
    pub fn scalar_thetas(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.theta[0]).collect()
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

struct ChunkOutcome {
    thetas: Vec<Vec<f64>>,
    attempts: u64,
    exhausted: bool,
}

fn check_request(n: usize, options: &AbcOptions) -> Result<u64> {
    if n == 0 {
        return Err(Error::InvalidDimension("requested sample size must be positive".into()));
    }
    if options.chunk_size == 0 {
        return Err(Error::InvalidDimension("chunk size must be positive".into()));
    }
    let budget = options
        .max_attempts
        .unwrap_or(DEFAULT_ATTEMPTS_PER_DRAW.saturating_mul(n as u64));
    if budget == 0 {
        return Err(Error::InvalidDimension("attempt budget must be positive".into()));
    }
    Ok(budget)
}

/// Splits `n` accepted draws into chunks, each with an attempt budget
/// proportional to its size. The budgets sum to `budget`.
fn chunk_plan(n: usize, chunk_size: usize, budget: u64) -> Vec<(usize, u64)> {
    let chunks = n.div_ceil(chunk_size);
    let mut plan = Vec::with_capacity(chunks);
    let mut assigned = 0u64;
    let mut covered = 0usize;
    for c in 0..chunks {
        let size = chunk_size.min(n - c * chunk_size);
        covered += size;
        let cumulative = ((budget as u128 * covered as u128) / n as u128) as u64;
        plan.push((size, cumulative - assigned));
        assigned = cumulative;
    }
    plan
}

/// Shared rejection loop. `accept` maps a simulated query to its acceptance
/// probability.
fn rejection_core<M, A>(
    model: &M,
    n: usize,
    stream: RngStream,
    options: &AbcOptions,
    accept: A,
) -> Result<AbcResult>
where
    M: BayesModel + ?Sized,
    A: Fn(&[f64]) -> f64 + Sync,
{
    let budget = check_request(n, options)?;
    let plan = chunk_plan(n, options.chunk_size, budget);
    let outcomes = plan
        .par_iter()
        .enumerate()
        .map(|(c, &(target, max_attempts))| -> Result<ChunkOutcome> {
            let mut rng = stream.child(c as u64).rng();
            let rng: &mut dyn RngCore = &mut rng;
            let mut thetas = Vec::with_capacity(target);
            let mut attempts = 0u64;
            while thetas.len() < target {
                if attempts == max_attempts {
                    return Ok(ChunkOutcome {
                        thetas,
                        attempts,
                        exhausted: true,
                    });
                }
                attempts += 1;
                let theta = model.sample_prior(rng);
                let s = model.simulate(&theta, rng)?;
                let u = open_unit(rng);
                let p = accept(&s);
                if !(p <= 1.0 + ACCEPTANCE_SLACK) {
                    return Err(Error::BoundViolation { value: p });
                }
                if u < p {
                    thetas.push(theta);
                }
            }
            Ok(ChunkOutcome {
                thetas,
                attempts,
                exhausted: false,
            })
        })
        .collect::<Result<Vec<ChunkOutcome>>>()?;

    let attempts: u64 = outcomes.iter().map(|o| o.attempts).sum();
    let accepted: usize = outcomes.iter().map(|o| o.thetas.len()).sum();
    if outcomes.iter().any(|o| o.exhausted) {
        return Err(Error::BudgetExhausted {
            requested: n,
            accepted,
            attempts,
        });
    }
    let draws = outcomes
        .into_iter()
        .enumerate()
        .flat_map(|(chunk, o)| {
            o.thetas
                .into_iter()
                .enumerate()
                .map(move |(index, theta)| AbcDraw {
                    theta,
                    chunk,
                    index,
                })
        })
        .collect();
    Ok(AbcResult {
        draws,
        attempts,
        acceptance_rate: n as f64 / attempts as f64,
        stream,
        chunk_size: options.chunk_size,
    })
}

fn check_query<M: BayesModel + ?Sized>(model: &M, q: &PrivatizedQuery) -> Result<()> {
    if q.dimension() != model.stat_dim() {
        return Err(Error::Shape {
            expected: model.stat_dim(),
            got: q.dimension(),
        });
    }
    Ok(())
}

/// Rejection ABC with the additive mechanism that released `q`.
///
/// Fails with [`Error::MechanismMismatch`] unless `mech` is exactly the
/// mechanism recorded in `q`.
pub fn rejection_abc<M: BayesModel + ?Sized>(
    model: &M,
    q: &PrivatizedQuery,
    mech: &AdditiveMechanism,
    n: usize,
    stream: RngStream,
    options: &AbcOptions,
) -> Result<AbcResult> {
    if mech.spec() != q.mechanism {
        return Err(Error::MechanismMismatch {
            query: q.mechanism.to_string(),
            sampler: mech.spec().to_string(),
        });
    }
    check_query(model, q)?;
    let s_obs = q.value.as_slice();
    rejection_core(model, n, stream, options, |s| {
        mech.acceptance_probability(s_obs, s)
    })
}

/// Rejection ABC for an arbitrary mechanism: accept with probability
/// `eta_obs(s_obs | s) / M`.
pub fn rejection_abc_general<M: BayesModel + ?Sized>(
    model: &M,
    q: &PrivatizedQuery,
    mech: &GeneralMechanism,
    n: usize,
    stream: RngStream,
    options: &AbcOptions,
) -> Result<AbcResult> {
    check_query(model, q)?;
    let s_obs = q.value.as_slice();
    let bound = mech.density_bound();
    rejection_core(model, n, stream, options, |s| {
        mech.conditional_density(s_obs, s) / bound
    })
}

/// Importance proposal `g` for [`importance_abc`].
pub trait Proposal: Send + Sync {
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    fn density(&self, theta: &[f64]) -> f64;

    fn describe(&self) -> String;

    /// True when `g` is the prior, so `pi_0 / g = 1` identically.
    fn is_prior(&self) -> bool {
        false
    }
}

/// The prior as proposal.
pub struct PriorProposal<'a, M: ?Sized> {
    pub model: &'a M,
}

impl<'a, M: BayesModel + ?Sized> PriorProposal<'a, M> {
    pub fn new(model: &'a M) -> Self {
        Self { model }
    }
}

impl<M: BayesModel + ?Sized> Proposal for PriorProposal<'_, M> {
    fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.model.sample_prior(rng)
    }

    fn density(&self, theta: &[f64]) -> f64 {
        self.model.prior_density(theta)
    }

    fn describe(&self) -> String {
        "prior".into()
    }

    fn is_prior(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub thetas: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub proposal: String,
}

impl WeightedSample {
    pub fn new(thetas: Vec<Vec<f64>>, weights: Vec<f64>, proposal: impl Into<String>) -> Result<Self> {
        if thetas.len() != weights.len() {
            return Err(Error::Shape {
                expected: thetas.len(),
                got: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return Err(Error::Numeric(format!("importance weight {w} is not finite and nonnegative")));
        }
        Ok(Self {
            thetas,
            weights,
            proposal: proposal.into(),
        })
    }

    /// Same draws with every weight multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> Self {
        Self {
            thetas: self.thetas.clone(),
            weights: self.weights.iter().map(|w| w * factor).collect(),
            proposal: self.proposal.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Importance-sampling ABC: `theta_i ~ g`, `s_i ~ pi(s | theta_i)`, weight
/// `eta((s_obs - s_i) / h) pi_0(theta_i) / g(theta_i)`. Nothing is rejected.
pub fn importance_abc<M, P>(
    model: &M,
    q: &PrivatizedQuery,
    mech: &AdditiveMechanism,
    proposal: &P,
    n: usize,
    stream: RngStream,
    chunk_size: usize,
) -> Result<WeightedSample>
where
    M: BayesModel + ?Sized,
    P: Proposal + ?Sized,
{
    if mech.spec() != q.mechanism {
        return Err(Error::MechanismMismatch {
            query: q.mechanism.to_string(),
            sampler: mech.spec().to_string(),
        });
    }
    check_query(model, q)?;
    if n == 0 || chunk_size == 0 {
        return Err(Error::InvalidDimension("sample and chunk sizes must be positive".into()));
    }
    let s_obs = q.value.as_slice();
    let chunks = n.div_ceil(chunk_size);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
            let size = chunk_size.min(n - c * chunk_size);
            let mut rng = stream.child(c as u64).rng();
            let rng: &mut dyn RngCore = &mut rng;
            let mut thetas = Vec::with_capacity(size);
            let mut weights = Vec::with_capacity(size);
            for _ in 0..size {
                let theta = proposal.sample(rng);
                let s = model.simulate(&theta, rng)?;
                let kernel = mech.kernel_weight(s_obs, &s);
                let w = if proposal.is_prior() {
                    kernel
                } else {
                    let g = proposal.density(&theta);
                    if !(g > 0.0) {
                        return Err(Error::InvalidProposal(theta));
                    }
                    kernel * model.prior_density(&theta) / g
                };
                thetas.push(theta);
                weights.push(w);
            }
            Ok((thetas, weights))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut thetas, mut weights) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (t, w) in parts {
        thetas.extend(t);
        weights.extend(w);
    }
    WeightedSample::new(thetas, weights, proposal.describe())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    pub value: f64,
    pub std_error: f64,
    pub ess: f64,
}

/// Self-normalized weighted mean of `values` with delta-method standard error
/// and effective sample size `(sum w)^2 / sum w^2`.
///
/// Values are centred on the value carrying the largest weight before
/// averaging, so a constant input is reproduced exactly.
pub fn weighted_mean(weights: &[f64], values: &[f64]) -> Result<WeightedEstimate> {
    if weights.len() != values.len() {
        return Err(Error::Shape {
            expected: weights.len(),
            got: values.len(),
        });
    }
    let peak = weights
        .iter()
        .copied()
        .fold(0.0f64, f64::max);
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::DegenerateWeights);
    }
    let reference = values[weights.iter().position(|&w| w == peak).unwrap()];
    // weights scaled by the peak keep sums in range without changing ratios
    let (mut sw, mut sw2, mut swd) = (0.0, 0.0, 0.0);
    for (&w, &v) in weights.iter().zip(values) {
        let w = w / peak;
        sw += w;
        sw2 += w * w;
        swd += w * (v - reference);
    }
    let shift = swd / sw;
    let value = reference + shift;
    let var_sum: f64 = weights
        .iter()
        .zip(values)
        .map(|(&w, &v)| {
            let w = w / peak;
            let d = v - reference - shift;
            w * w * d * d
        })
        .sum();
    Ok(WeightedEstimate {
        value,
        std_error: var_sum.sqrt() / sw,
        ess: sw * sw / sw2,
    })
}

/// Self-normalized importance estimate of `E(a(theta) | s_obs)`.
pub fn weighted_estimate<F: Fn(&[f64]) -> f64>(ws: &WeightedSample, a: F) -> Result<WeightedEstimate> {
    let values: Vec<f64> = ws.thetas.iter().map(|t| a(t)).collect();
    weighted_mean(&ws.weights, &values)
}

/// Overall acceptance probability of rejection ABC, `evidence / max eta`.
///
/// `evidence` is in kernel units: the integral of `prior x likelihood x
/// eta((s_obs - s) / h)`, that is the proper evidence times `h^p`.
pub fn theoretical_acceptance_rate(evidence: f64, kernel: &NoiseKernel) -> f64 {
    evidence / kernel.mode_density()
}

/// [`theoretical_acceptance_rate`] from the evidence as a proper density in
/// `s_obs`.
pub fn acceptance_rate_from_density(evidence_density: f64, mech: &AdditiveMechanism) -> f64 {
    let kernel_units = evidence_density * mech.bandwidth().powi(mech.dimension() as i32);
    theoretical_acceptance_rate(kernel_units, mech.kernel())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::{make_epsilon_laplace, PrivacyBudget};
    use crate::model::GammaPoisson;
    use crate::oracle_gp::{naive_conjugate_posterior, true_posterior_grid, GpSetting};

    fn setup(epsilon: f64) -> (GammaPoisson, PrivatizedQuery, AdditiveMechanism) {
        let model = GammaPoisson::new(25.0, 1.0).unwrap();
        let mech = make_epsilon_laplace(PrivacyBudget::pure(epsilon).unwrap(), 1.0, 1).unwrap();
        let q = PrivatizedQuery::new(vec![37.4], mech.spec()).unwrap();
        (model, q, mech)
    }

    fn mean(xs: &[f64]) -> f64 {
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    #[test]
    fn returns_exactly_n_draws() {
        let (model, q, mech) = setup(0.2);
        let opts = AbcOptions::default().with_chunk_size(100);
        let r = rejection_abc(&model, &q, &mech, 1234, RngStream::new(1), &opts).unwrap();
        assert_eq!(r.len(), 1234);
        assert_eq!(r.acceptance_rate, 1234.0 / r.attempts as f64);
        let last = r.draws.last().unwrap();
        assert_eq!((last.chunk, last.index), (12, 33));
    }

    #[test]
    fn mechanism_mismatch_is_fatal() {
        let (model, q, _) = setup(0.2);
        let other = make_epsilon_laplace(PrivacyBudget::pure(0.5).unwrap(), 1.0, 1).unwrap();
        let err = rejection_abc(&model, &q, &other, 10, RngStream::new(0), &AbcOptions::default());
        assert!(matches!(err, Err(Error::MechanismMismatch { .. })));
    }

    #[test]
    fn exhausted_budget_reports_partial_progress() {
        let (model, q, mech) = setup(0.2);
        let opts = AbcOptions::default().with_max_attempts(50);
        match rejection_abc(&model, &q, &mech, 1000, RngStream::new(0), &opts) {
            Err(Error::BudgetExhausted {
                requested,
                accepted,
                attempts,
            }) => {
                assert_eq!(requested, 1000);
                assert_eq!(attempts, 50);
                assert!(accepted < 1000);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kernel_mode_accepts_surely() {
        let (_, _, mech) = setup(0.2);
        assert_eq!(mech.acceptance_probability(&[37.0], &[37.0]), 1.0);
    }

    #[test]
    fn chunking_is_independent_of_thread_count() {
        let (model, q, mech) = setup(0.2);
        let opts = AbcOptions::default().with_chunk_size(500);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool
            .install(|| rejection_abc(&model, &q, &mech, 3000, RngStream::new(5), &opts))
            .unwrap();
        let parallel = rejection_abc(&model, &q, &mech, 3000, RngStream::new(5), &opts).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn general_sampler_agrees_draw_for_draw() {
        let (model, q, mech) = setup(0.2);
        let general = GeneralMechanism::from_additive(&mech);
        let opts = AbcOptions::default();
        let a = rejection_abc(&model, &q, &mech, 5000, RngStream::new(9), &opts).unwrap();
        let b = rejection_abc_general(&model, &q, &general, 5000, RngStream::new(9), &opts).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.attempts, b.attempts);
    }

    #[test]
    fn underestimated_bound_is_detected() {
        let (model, q, mech) = setup(0.2);
        let general = GeneralMechanism::from_additive(&mech);
        let tight = general.density_bound() * 0.5;
        let general = general.with_density_bound(tight).unwrap();
        let err = rejection_abc_general(&model, &q, &general, 1000, RngStream::new(0), &AbcOptions::default());
        assert!(matches!(err, Err(Error::BoundViolation { .. })));
    }

    #[test]
    fn looser_bound_scales_acceptance_rate() {
        let (model, q, mech) = setup(0.2);
        let general = GeneralMechanism::from_additive(&mech);
        let loose = general.clone().with_density_bound(10.0 * general.density_bound()).unwrap();
        let opts = AbcOptions::default();
        let a = rejection_abc_general(&model, &q, &general, 20_000, RngStream::new(2), &opts).unwrap();
        let b = rejection_abc_general(&model, &q, &loose, 2_000, RngStream::new(3), &opts).unwrap();
        let ratio = a.acceptance_rate / b.acceptance_rate;
        // b's rate has relative SE near 1 / sqrt(2000)
        assert!((ratio - 10.0).abs() < 10.0 * 4.0 / 2000f64.sqrt(), "ratio {ratio}");
        let (ma, mb) = (mean(&a.scalar_thetas()), mean(&b.scalar_thetas()));
        assert!((ma - mb).abs() < 4.0 * 4.7 * (1.0 / 20_000.0 + 1.0 / 2_000.0f64).sqrt());
    }

    #[test]
    fn posterior_mean_matches_quadrature() {
        let (model, q, mech) = setup(0.2);
        let r = rejection_abc(&model, &q, &mech, 50_000, RngStream::new(3), &AbcOptions::default()).unwrap();
        let xs = r.scalar_thetas();
        let m = mean(&xs);
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt();
        let truth = true_posterior_grid(&GpSetting::reference(), 20_001).unwrap().mean();
        assert!((m - truth).abs() < 3.0 * sd / (xs.len() as f64).sqrt(), "{m} vs {truth}");
    }

    #[test]
    fn tighter_noise_moves_toward_noiseless_posterior() {
        let target = naive_conjugate_posterior(&GpSetting::reference()).unwrap().mean();
        let gaps: Vec<f64> = [0.2, 1.0, 5.0]
            .iter()
            .map(|&eps| {
                let (model, q, mech) = setup(eps);
                let r = rejection_abc(&model, &q, &mech, 20_000, RngStream::new(4), &AbcOptions::default())
                    .unwrap();
                (mean(&r.scalar_thetas()) - target).abs()
            })
            .collect();
        // posterior sd is about 4.7, so MC error on each mean is about 0.03
        assert!(gaps[0] > gaps[1] + 0.1 && gaps[1] > gaps[2] - 0.1, "{gaps:?}");
        assert!(gaps[0] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn prior_proposal_weights_are_kernel_values() {
        let (model, q, mech) = setup(0.2);
        let ws = importance_abc(&model, &q, &mech, &PriorProposal::new(&model), 2000, RngStream::new(1), 256)
            .unwrap();
        assert_eq!(ws.len(), 2000);
        assert!(ws.weights.iter().all(|w| *w > 0.0 && *w <= 0.5));
        assert_eq!(ws.proposal, "prior");
    }

    struct Shifted;

    impl Proposal for Shifted {
        fn sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
            vec![10.0 + 40.0 * open_unit(rng)]
        }

        fn density(&self, theta: &[f64]) -> f64 {
            if (10.0..=50.0).contains(&theta[0]) {
                1.0 / 40.0
            } else {
                0.0
            }
        }

        fn describe(&self) -> String {
            "uniform(10, 50)".into()
        }
    }

    struct Broken;

    impl Proposal for Broken {
        fn sample(&self, _: &mut dyn RngCore) -> Vec<f64> {
            vec![30.0]
        }

        fn density(&self, _: &[f64]) -> f64 {
            0.0
        }

        fn describe(&self) -> String {
            "broken".into()
        }
    }

    #[test]
    fn user_proposal_is_consistent() {
        let (model, q, mech) = setup(0.2);
        let ws = importance_abc(&model, &q, &mech, &Shifted, 200_000, RngStream::new(8), 4096).unwrap();
        let est = weighted_estimate(&ws, |t| t[0]).unwrap();
        let truth = true_posterior_grid(&GpSetting::reference(), 20_001).unwrap();
        // the uniform proposal truncates the posterior to [10, 50]
        let inside = truth.cdf_at(50.0) - truth.cdf_at(10.0);
        assert!(inside > 0.999);
        assert!((est.value - truth.mean()).abs() < 4.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn zero_proposal_density_rejected() {
        let (model, q, mech) = setup(0.2);
        let err = importance_abc(&model, &q, &mech, &Broken, 10, RngStream::new(0), 4);
        assert!(matches!(err, Err(Error::InvalidProposal(_))));
    }

    #[test]
    fn constant_function_estimates_exactly() {
        let ws = WeightedSample::new(
            vec![vec![1.0], vec![5.0], vec![9.0]],
            vec![0.3, 1e-9, 7.5],
            "test",
        )
        .unwrap();
        let e = weighted_estimate(&ws, |_| 2.75).unwrap();
        assert_eq!(e.value, 2.75);
        let one = weighted_estimate(&ws, |_| 1.0).unwrap();
        assert_eq!(one.value, 1.0);
    }

    #[test]
    fn single_weight_is_degenerate_sample() {
        let ws = WeightedSample::new(vec![vec![1.0], vec![4.25], vec![9.0]], vec![0.0, 3.0, 0.0], "t").unwrap();
        let e = weighted_estimate(&ws, |t| t[0]).unwrap();
        assert_eq!(e.value, 4.25);
        assert_eq!(e.ess, 1.0);
    }

    #[test]
    fn all_zero_weights_rejected() {
        let ws = WeightedSample::new(vec![vec![1.0], vec![2.0]], vec![0.0, 0.0], "t").unwrap();
        assert!(matches!(weighted_estimate(&ws, |t| t[0]), Err(Error::DegenerateWeights)));
        assert!(WeightedSample::new(vec![vec![1.0]], vec![f64::NAN], "t").is_err());
    }

    #[test]
    fn rescaling_weights_leaves_estimate_unchanged() {
        let (model, q, mech) = setup(0.2);
        let ws = importance_abc(&model, &q, &mech, &PriorProposal::new(&model), 10_000, RngStream::new(6), 1024)
            .unwrap();
        let base = weighted_estimate(&ws, |t| t[0]).unwrap();
        for factor in [1e-30, 0.37, 1e25] {
            let e = weighted_estimate(&ws.rescaled(factor), |t| t[0]).unwrap();
            assert!(((e.value - base.value) / base.value).abs() < 1e-12);
            assert!(((e.std_error - base.std_error) / base.std_error).abs() < 1e-12);
        }
    }

    #[test]
    fn acceptance_rate_identities() {
        let kernel = NoiseKernel::laplace(1).unwrap();
        assert_eq!(theoretical_acceptance_rate(0.0, &kernel), 0.0);
        let r = theoretical_acceptance_rate(0.1, &kernel);
        assert!((r - 0.2).abs() < 1e-15);
        // a kernel with doubled mode density halves the rate
        assert!((0.1 / (2.0 * kernel.mode_density()) - r / 2.0).abs() < 1e-15);
    }
}
