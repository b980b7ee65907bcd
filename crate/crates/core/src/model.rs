//! Bayesian model abstraction and the Gamma-Poisson count model.

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::mechanisms::MechanismSpec;
use crate::rngkit::{sample_gamma, sample_poisson_inversion, PoissonTable};

/// Prior, likelihood simulator and optional likelihood-side derivatives.
///
/// Only [`sample_prior`](Self::sample_prior), [`prior_density`](Self::prior_density)
/// and [`simulate`](Self::simulate) are needed for ABC. The optional methods
/// unlock the MCEM paths: `sufficient_stat` and `complete_data_mle` for the
/// exponential-family E/M steps, `likelihood_log_density` for the generic
/// M-step, `score` and `score_jacobian` for observed score and information.
pub trait BayesModel: Send + Sync {
    fn param_dim(&self) -> usize;

    fn stat_dim(&self) -> usize;

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64>;

    fn prior_density(&self, theta: &[f64]) -> f64;

    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>>;

    /// `n` draws at one `theta`, flattened row-major. Must consume the
    /// stream exactly as `n` calls to `simulate` would.
    fn simulate_batch(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n * self.stat_dim());
        for _ in 0..n {
            out.extend(self.simulate(theta, rng)?);
        }
        Ok(out)
    }

    fn likelihood_log_density(&self, _s: &[f64], _theta: &[f64]) -> Option<f64> {
        None
    }

    fn sufficient_stat(&self, _s: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// `grad_theta ln pi(s | theta)`.
    fn score(&self, _s: &[f64], _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Jacobian of the score with respect to theta.
    fn score_jacobian(&self, _s: &[f64], _theta: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Closed-form maximizer of the expected complete-data log likelihood
    /// given `E(b(s))`, for exponential families.
    fn complete_data_mle(&self, _expected_stat: &[f64]) -> Option<Result<Vec<f64>>> {
        None
    }
}

/// One joint draw `theta ~ prior`, `s ~ pi(s | theta)`.
pub fn simulate_pair<M: BayesModel + ?Sized>(
    model: &M,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let theta = model.sample_prior(rng);
    let s = model.simulate(&theta, rng)?;
    Ok((theta, s))
}

/// `theta ~ Gamma(alpha, beta)` (rate parametrization), `s | theta ~ Poisson(theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPoisson {
    pub alpha: f64,
    pub beta: f64,
}

pub fn gamma_poisson_model(alpha: f64, beta: f64) -> Result<GammaPoisson> {
    GammaPoisson::new(alpha, beta)
}

impl GammaPoisson {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!(
                "gamma prior needs positive hyperparameters (alpha = {alpha}, beta = {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn prior_mean(&self) -> f64 {
        self.alpha / self.beta
    }

    pub fn ln_prior_density(&self, theta: f64) -> f64 {
        if theta <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.alpha * self.beta.ln() - ln_gamma(self.alpha) + (self.alpha - 1.0) * theta.ln()
            - self.beta * theta
    }
}

/// `ln Poisson(s | theta)` for a nonnegative integer `s`; `-inf` otherwise.
pub fn poisson_ln_pmf(s: f64, theta: f64) -> f64 {
    if s < 0.0 || s.fract() != 0.0 || theta < 0.0 {
        return f64::NEG_INFINITY;
    }
    if theta == 0.0 {
        return if s == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    s * theta.ln() - theta - ln_gamma(s + 1.0)
}

impl BayesModel for GammaPoisson {
    fn param_dim(&self) -> usize {
        1
    }

    fn stat_dim(&self) -> usize {
        1
    }

    fn sample_prior(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![sample_gamma(rng, self.alpha, self.beta).expect("hyperparameters validated")]
    }

    fn prior_density(&self, theta: &[f64]) -> f64 {
        self.ln_prior_density(theta[0]).exp()
    }

    /// Poisson draw by inversion: one uniform per draw, monotone in `theta`.
    fn simulate(&self, theta: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        Ok(vec![sample_poisson_inversion(rng, theta[0])? as f64])
    }

    fn simulate_batch(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let table = PoissonTable::new(theta[0])?;
        (0..n).map(|_| table.sample(rng).map(|k| k as f64)).collect()
    }

    fn likelihood_log_density(&self, s: &[f64], theta: &[f64]) -> Option<f64> {
        Some(poisson_ln_pmf(s[0], theta[0]))
    }

    fn sufficient_stat(&self, s: &[f64]) -> Option<Vec<f64>> {
        Some(vec![s[0]])
    }

    fn score(&self, s: &[f64], theta: &[f64]) -> Option<Vec<f64>> {
        Some(vec![s[0] / theta[0] - 1.0])
    }

    fn score_jacobian(&self, s: &[f64], theta: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_element(1, 1, -s[0] / (theta[0] * theta[0])))
    }

    fn complete_data_mle(&self, expected_stat: &[f64]) -> Option<Result<Vec<f64>>> {
        Some(crate::mcem::m_step_exact_poisson(expected_stat[0]).map(|t| vec![t]))
    }
}

/// A released query value together with the mechanism that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivatizedQuery {
    pub value: Vec<f64>,
    pub mechanism: MechanismSpec,
}

impl PrivatizedQuery {
    pub fn new(value: Vec<f64>, mechanism: MechanismSpec) -> Result<Self> {
        if value.len() != mechanism.p {
            return Err(Error::Shape {
                expected: mechanism.p,
                got: value.len(),
            });
        }
        Ok(Self { value, mechanism })
    }

    pub fn dimension(&self) -> usize {
        self.value.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngkit::RngStream;
    use proptest::prelude::*;

    fn reference_model() -> GammaPoisson {
        gamma_poisson_model(25.0, 1.0).unwrap()
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(gamma_poisson_model(0.0, 1.0).is_err());
        assert!(gamma_poisson_model(1.0, -2.0).is_err());
    }

    #[test]
    fn prior_mean() {
        assert_eq!(reference_model().prior_mean(), 25.0);
    }

    #[test]
    fn score_vanishes_at_mean() {
        let m = reference_model();
        assert_eq!(m.score(&[30.0], &[30.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn score_matches_finite_difference() {
        let m = reference_model();
        let (s, theta) = (37.0, 30.0);
        let step = 1e-5;
        let fd = (poisson_ln_pmf(s, theta + step) - poisson_ln_pmf(s, theta - step)) / (2.0 * step);
        let score = m.score(&[s], &[theta]).unwrap()[0];
        assert!((score - (37.0 / 30.0 - 1.0)).abs() < 1e-15);
        assert!((fd - score).abs() < 1e-6, "fd {fd} score {score}");
    }

    #[test]
    fn prior_integrates_to_one() {
        let m = reference_model();
        let (lo, hi, n) = (0.0, 120.0, 120_000);
        let h = (hi - lo) / n as f64;
        let mass: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * m.prior_density(&[lo + i as f64 * h])
            })
            .sum::<f64>()
            * h;
        assert!((mass - 1.0).abs() < 1e-8, "{mass}");
    }

    #[test]
    fn joint_simulation_moments() {
        let m = reference_model();
        let mut rng = RngStream::new(17).rng();
        let n = 1_000_000;
        let s: Vec<f64> = (0..n)
            .map(|_| simulate_pair(&m, &mut rng).unwrap().1[0])
            .collect();
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((mean - 25.0).abs() < 0.05, "mean {mean}");
        assert!((var - 50.0).abs() < 1.0, "var {var}");
    }

    #[test]
    fn simulator_agrees_with_log_density() {
        // chi-square goodness of fit of 1e5 Poisson(12.5) draws, cells pooled in
        // the tails so every expected count is at least 5
        let m = reference_model();
        let theta = [12.5];
        let mut rng = RngStream::new(23).rng();
        let n = 100_000;
        let (lo, hi) = (3usize, 25usize);
        let mut counts = vec![0u64; hi - lo + 1];
        for _ in 0..n {
            let s = m.simulate(&theta, &mut rng).unwrap()[0] as usize;
            counts[s.clamp(lo, hi) - lo] += 1;
        }
        let pmf = |k: usize| m.likelihood_log_density(&[k as f64], &theta).unwrap().exp();
        let mut expected: Vec<f64> = (lo..=hi).map(pmf).collect();
        expected[0] = (0..=lo).map(pmf).sum();
        expected[hi - lo] = 1.0 - (0..hi).map(pmf).sum::<f64>();
        let expected: Vec<f64> = expected.iter().map(|p| p * n as f64).collect();
        let stat = crate::stats::chi_square_statistic(&counts, &expected);
        let df = (counts.len() - 1) as f64;
        let critical = {
            use statrs::distribution::{ChiSquared, ContinuousCDF};
            ChiSquared::new(df).unwrap().inverse_cdf(1.0 - 1e-3)
        };
        assert!(stat < critical, "chi2 {stat} vs {critical}");
    }

    #[test]
    fn privatized_query_dimension_checked() {
        let spec = crate::mechanisms::MechanismSpec {
            kind: crate::mechanisms::MechanismKind::LaplaceEps,
            epsilon: 0.2,
            delta: 0.0,
            gs: 1.0,
            p: 1,
        };
        assert!(PrivatizedQuery::new(vec![37.4], spec).is_ok());
        assert!(matches!(
            PrivatizedQuery::new(vec![1.0, 2.0], spec),
            Err(Error::Shape { .. })
        ));
    }

    proptest! {
        #[test]
        fn score_is_gradient_of_log_density(s in 0u32..200, theta in 0.5f64..150.0) {
            let m = reference_model();
            let s = s as f64;
            let step = 1e-6 * theta;
            let fd = (poisson_ln_pmf(s, theta + step) - poisson_ln_pmf(s, theta - step)) / (2.0 * step);
            let score = m.score(&[s], &[theta]).unwrap()[0];
            let scale = score.abs().max(1.0);
            prop_assert!((fd - score).abs() / scale < 1e-5, "fd {} score {}", fd, score);

            let jac = m.score_jacobian(&[s], &[theta]).unwrap()[(0, 0)];
            let lam = |t: f64| m.score(&[s], &[t]).unwrap()[0];
            let fd2 = (lam(theta + step) - lam(theta - step)) / (2.0 * step);
            prop_assert!((fd2 - jac).abs() / jac.abs().max(1e-3) < 1e-5);
        }
    }
}
