//! Ground truth for the Gamma-Poisson model observed through the
//! epsilon-Laplace counting-query mechanism.
//!
//! Two independent routes evaluate the unnormalized posterior of `theta`
//! given a privatized count `s_obs`:
//!
//! * [`posterior_unnorm_closed`]: the closed form in terms of regularized
//!   incomplete gamma functions with integer shape `ceil(s_obs)`,
//!   `theta^(alpha-1) e^{-(beta+1) theta} [Q(n, theta e^eps) e^{theta e^eps - eps s_obs}
//!   + P(n, theta e^-eps) e^{theta e^-eps + eps s_obs}]`.
//! * [`brute_force_unnorm`]: the prior density times the truncated sum
//!   `sum_s Poisson(s | theta) (eps / 2) e^{-eps |s_obs - s|}`.
//!
//! Everything is evaluated in log space. In the closed form the factor
//! `e^{theta e^eps}` is cancelled analytically against the `e^{-x}` inside the
//! finite-sum representation of `Q`, so no intermediate overflows.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::poisson_ln_pmf;
use crate::optim::golden_section_max;
use crate::rngkit::open_unit;

/// Log-sum-exp of two terms, tolerating `-inf`.
fn ln_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn ln_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `ln sum_{k=0}^{n-1} x^k / k!`.
fn ln_head_sum(n: u64, x: f64) -> f64 {
    if n == 0 {
        return f64::NEG_INFINITY;
    }
    if x == 0.0 {
        return 0.0;
    }
    let ln_x = x.ln();
    let mut ln_fact = 0.0;
    ln_sum((0..n).map(|k| {
        if k > 0 {
            ln_fact += (k as f64).ln();
        }
        k as f64 * ln_x - ln_fact
    }))
}

/// `ln sum_{k=n}^{inf} x^k / k!`, summed until terms past the peak at `k ~ x`
/// fall below `e^-45` of the running total.
fn ln_tail_sum(n: u64, x: f64) -> f64 {
    if x == 0.0 {
        return if n == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let ln_x = x.ln();
    let mut k = n as f64;
    let mut term = k * ln_x - ln_gamma(k + 1.0);
    let mut acc = f64::NEG_INFINITY;
    loop {
        acc = ln_add(acc, term);
        if k > x && term < acc - 45.0 {
            break acc;
        }
        k += 1.0;
        term += ln_x - k.ln();
    }
}

fn check_incomplete_args(n: u64, x: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("incomplete gamma shape must be at least 1".into()));
    }
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("incomplete gamma argument must be >= 0, got {x}")));
    }
    Ok(())
}

/// `ln(Gamma(n, x) / Gamma(n))` for integer `n >= 1`, by the exact finite sum
/// `e^-x sum_{k<n} x^k / k!`.
pub fn ln_upper_incomplete_gamma_int(n: u64, x: f64) -> Result<f64> {
    check_incomplete_args(n, x)?;
    Ok(-x + ln_head_sum(n, x))
}

/// Regularized upper incomplete gamma `Gamma(n, x) / Gamma(n)`, integer `n`.
pub fn upper_incomplete_gamma_int(n: u64, x: f64) -> Result<f64> {
    Ok(ln_upper_incomplete_gamma_int(n, x)?.exp())
}

/// `ln(gamma(n, x) / Gamma(n))`: the complement via the series
/// `e^-x sum_{k>=n} x^k / k!` when `1 - Q` would cancel.
pub fn ln_lower_incomplete_gamma_int(n: u64, x: f64) -> Result<f64> {
    let ln_q = ln_upper_incomplete_gamma_int(n, x)?;
    if ln_q < -std::f64::consts::LN_2 {
        Ok((-ln_q.exp()).ln_1p())
    } else {
        Ok(-x + ln_tail_sum(n, x))
    }
}

pub fn lower_incomplete_gamma_int(n: u64, x: f64) -> Result<f64> {
    Ok(ln_lower_incomplete_gamma_int(n, x)?.exp())
}

/// Prior, budget and observation of the Gamma-Poisson-Laplace example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpSetting {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub s_obs: f64,
}

impl GpSetting {
    pub fn new(alpha: f64, beta: f64, epsilon: f64, s_obs: f64) -> Result<Self> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(alpha) && positive(beta) && positive(epsilon)) {
            return Err(Error::Domain(format!(
                "alpha, beta, epsilon must be positive (got {alpha}, {beta}, {epsilon})"
            )));
        }
        if !s_obs.is_finite() {
            return Err(Error::Domain(format!("s_obs must be finite, got {s_obs}")));
        }
        Ok(Self {
            alpha,
            beta,
            epsilon,
            s_obs,
        })
    }

    /// alpha = 25, beta = 1, epsilon = 0.2, s_obs = 37.4.
    pub fn reference() -> Self {
        Self {
            alpha: 25.0,
            beta: 1.0,
            epsilon: 0.2,
            s_obs: 37.4,
        }
    }

    pub fn bandwidth(&self) -> f64 {
        1.0 / self.epsilon
    }

    fn ln_prior(&self, theta: f64) -> f64 {
        self.alpha * self.beta.ln() - ln_gamma(self.alpha) + (self.alpha - 1.0) * theta.ln()
            - self.beta * theta
    }

    /// `ln((eps / 2) e^{-eps |s_obs - s|})`, the proper Laplace observation density.
    fn ln_obs_density(&self, s: f64) -> f64 {
        (0.5 * self.epsilon).ln() - self.epsilon * (self.s_obs - s).abs()
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("theta must be positive, got {theta}")))
    }
}

fn finite_or_numeric(value: f64, what: &str, theta: f64) -> Result<f64> {
    if value.is_nan() || value == f64::INFINITY {
        Err(Error::Numeric(format!("{what} is {value} at theta = {theta}")))
    } else {
        Ok(value)
    }
}

/// Log of the closed-form unnormalized posterior.
pub fn ln_posterior_unnorm_closed(setting: &GpSetting, theta: f64) -> Result<f64> {
    check_theta(theta)?;
    let GpSetting {
        alpha,
        beta,
        epsilon,
        s_obs,
    } = *setting;
    let shape = s_obs.ceil();
    let x_plus = theta * epsilon.exp();
    let x_minus = theta * (-epsilon).exp();
    // ln[Q(n, x+) e^{x+}] = ln sum_{k<n} x+^k / k!; empty when n <= 0
    let upper = if shape >= 1.0 {
        ln_head_sum(shape as u64, x_plus) - epsilon * s_obs
    } else {
        f64::NEG_INFINITY
    };
    // ln[P(n, x-) e^{x-}] = ln sum_{k>=n} x-^k / k!; all k >= 0 when n <= 0
    let lower = ln_tail_sum(shape.max(0.0) as u64, x_minus) + epsilon * s_obs;
    let value = (alpha - 1.0) * theta.ln() - (beta + 1.0) * theta + ln_add(upper, lower);
    finite_or_numeric(value, "closed-form log posterior", theta)
}

pub fn posterior_unnorm_closed(setting: &GpSetting, theta: f64) -> Result<f64> {
    Ok(ln_posterior_unnorm_closed(setting, theta)?.exp())
}

/// Default Poisson truncation point for the brute-force sums.
///
/// With `m = max(theta, s_obs)`, every term beyond `m + 12 sqrt(m) + 50` is
/// dominated by a Poisson tail of relative mass below 1e-12.
pub fn default_truncation(setting: &GpSetting, theta: f64) -> u64 {
    let m = theta.max(setting.s_obs).max(0.0);
    (m + 12.0 * m.sqrt() + 50.0).ceil() as u64
}

/// `ln sum_{s=0}^{s_max} Poisson(s | theta) (eps/2) e^{-eps |s_obs - s|}`.
pub fn ln_marginal_truncated(setting: &GpSetting, theta: f64, s_max: u64) -> Result<f64> {
    check_theta(theta)?;
    let value = ln_sum((0..=s_max).map(|s| {
        let s = s as f64;
        poisson_ln_pmf(s, theta) + setting.ln_obs_density(s)
    }));
    finite_or_numeric(value, "log marginal likelihood", theta)
}

/// Log marginal likelihood `ln pi(s_obs | theta)` as a density in `s_obs`.
pub fn marginal_loglik_value(setting: &GpSetting, theta: f64) -> Result<f64> {
    ln_marginal_truncated(setting, theta, default_truncation(setting, theta))
}

pub fn ln_brute_force_unnorm_truncated(setting: &GpSetting, theta: f64, s_max: u64) -> Result<f64> {
    Ok(setting.ln_prior(theta) + ln_marginal_truncated(setting, theta, s_max)?)
}

/// Log of prior density times truncated marginal likelihood.
pub fn ln_brute_force_unnorm(setting: &GpSetting, theta: f64) -> Result<f64> {
    ln_brute_force_unnorm_truncated(setting, theta, default_truncation(setting, theta))
}

pub fn brute_force_unnorm(setting: &GpSetting, theta: f64) -> Result<f64> {
    Ok(ln_brute_force_unnorm(setting, theta)?.exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalLik {
    pub value: f64,
    pub first_derivative: f64,
    pub second_derivative: f64,
}

/// Log marginal likelihood with central-difference derivatives (step `1e-4 theta`).
pub fn marginal_loglik(setting: &GpSetting, theta: f64) -> Result<MarginalLik> {
    check_theta(theta)?;
    let step = 1e-4 * theta;
    let f = |t: f64| marginal_loglik_value(setting, t);
    let (lo, mid, hi) = (f(theta - step)?, f(theta)?, f(theta + step)?);
    Ok(MarginalLik {
        value: mid,
        first_derivative: (hi - lo) / (2.0 * step),
        second_derivative: (hi - 2.0 * mid + lo) / (step * step),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleOracle {
    pub argmax: f64,
    pub neg_second_derivative: f64,
}

/// Maximizes the marginal likelihood on `[lo, hi]` by golden section.
pub fn mle_oracle(setting: &GpSetting, lo: f64, hi: f64) -> Result<MleOracle> {
    check_theta(lo)?;
    if !(hi > lo) {
        return Err(Error::Bracket { lo, hi });
    }
    let argmax = golden_section_max(
        |t| marginal_loglik_value(setting, t).unwrap_or(f64::NEG_INFINITY),
        lo,
        hi,
        1e-9,
    );
    let curvature = marginal_loglik(setting, argmax)?;
    Ok(MleOracle {
        argmax,
        neg_second_derivative: -curvature.second_derivative,
    })
}

/// Moments of the latent count given `s_obs` at fixed `theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentMoments {
    pub mean: f64,
    pub variance: f64,
}

/// `E(s | s_obs, theta)` and `Var(s | s_obs, theta)` by truncated summation.
pub fn latent_moments(setting: &GpSetting, theta: f64) -> Result<LatentMoments> {
    check_theta(theta)?;
    let s_max = default_truncation(setting, theta);
    let logs: Vec<f64> = (0..=s_max)
        .map(|s| poisson_ln_pmf(s as f64, theta) + setting.ln_obs_density(s as f64))
        .collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mean = w.iter().enumerate().map(|(s, w)| s as f64 * w).sum::<f64>() / total;
    let variance = w
        .iter()
        .enumerate()
        .map(|(s, w)| (s as f64 - mean).powi(2) * w)
        .sum::<f64>()
        / total;
    Ok(LatentMoments { mean, variance })
}

/// `E_{s | theta}[eta_obs(s_obs | s)^2]` with the proper Laplace density.
pub fn obs_density_second_moment(setting: &GpSetting, theta: f64) -> Result<f64> {
    check_theta(theta)?;
    let s_max = default_truncation(setting, theta);
    let value = ln_sum((0..=s_max).map(|s| {
        let s = s as f64;
        poisson_ln_pmf(s, theta) + 2.0 * setting.ln_obs_density(s)
    }))
    .exp();
    finite_or_numeric(value, "second moment of the observation density", theta)
}

/// A gamma law in shape/rate form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaLaw {
    pub shape: f64,
    pub rate: f64,
}

impl GammaLaw {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln()
            - self.rate * x
    }

    fn distribution(&self) -> Gamma {
        Gamma::new(self.shape, self.rate).expect("gamma law parameters validated")
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.distribution().cdf(x)
    }

    pub fn quantile(&self, p: f64) -> f64 {
        self.distribution().inverse_cdf(p)
    }
}

/// Conjugate posterior that treats `s_obs` as the noiseless count:
/// `Gamma(alpha + s_obs, beta + 1)`.
pub fn naive_conjugate_posterior(setting: &GpSetting) -> Result<GammaLaw> {
    let shape = setting.alpha + setting.s_obs;
    if shape <= 0.0 {
        return Err(Error::Domain(format!(
            "alpha + s_obs = {shape} leaves no proper conjugate posterior"
        )));
    }
    Ok(GammaLaw {
        shape,
        rate: setting.beta + 1.0,
    })
}

pub fn prior_law(setting: &GpSetting) -> GammaLaw {
    GammaLaw {
        shape: setting.alpha,
        rate: setting.beta,
    }
}

/// Density tabulated on a strictly increasing grid, with trapezoid CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub theta: Vec<f64>,
    pub values: Vec<f64>,
    pub cdf: Vec<f64>,
    pub normalized: bool,
    pub label: String,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + i as f64 * step })
        .collect()
}

fn check_grid(lo: f64, hi: f64, n_points: usize) -> Result<()> {
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::Domain(format!("grid needs lo < hi, got [{lo}, {hi}]")));
    }
    if n_points < 2 {
        return Err(Error::InvalidDimension("grid needs at least 2 points".into()));
    }
    Ok(())
}

/// Tabulates a nonnegative `f` and normalizes it to unit trapezoid mass.
pub fn normalize_on_grid<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    n_points: usize,
) -> Result<DensityGrid> {
    check_grid(lo, hi, n_points)?;
    let theta = linspace(lo, hi, n_points);
    let values = theta
        .iter()
        .map(|&t| {
            let v = f(t);
            if v >= 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Numeric(format!("density value {v} at theta = {t}")))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    DensityGrid::from_values(theta, values)
}

/// Like [`normalize_on_grid`] for a log density, exponentiated relative to
/// its maximum on the grid.
pub fn normalize_log_on_grid<F: Fn(f64) -> Result<f64>>(
    ln_f: F,
    lo: f64,
    hi: f64,
    n_points: usize,
) -> Result<DensityGrid> {
    check_grid(lo, hi, n_points)?;
    let theta = linspace(lo, hi, n_points);
    let logs = theta.iter().map(|&t| ln_f(t)).collect::<Result<Vec<f64>>>()?;
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::Numeric("log density is -inf across the grid".into()));
    }
    let values = logs.iter().map(|l| (l - m).exp()).collect();
    DensityGrid::from_values(theta, values)
}

impl DensityGrid {
    fn from_values(theta: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let mut cdf = Vec::with_capacity(theta.len());
        cdf.push(0.0);
        for i in 1..theta.len() {
            let piece = 0.5 * (values[i] + values[i - 1]) * (theta[i] - theta[i - 1]);
            cdf.push(cdf[i - 1] + piece);
        }
        let total = *cdf.last().unwrap();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Numeric(format!("grid integral is {total}")));
        }
        Ok(Self {
            theta,
            values: values.iter().map(|v| v / total).collect(),
            cdf: cdf.iter().map(|c| c / total).collect(),
            normalized: true,
            label: String::new(),
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    fn trapezoid<F: Fn(f64, f64) -> f64>(&self, g: F) -> f64 {
        self.theta
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(t, v)| 0.5 * (g(t[0], v[0]) + g(t[1], v[1])) * (t[1] - t[0]))
            .sum()
    }

    pub fn integral(&self) -> f64 {
        self.trapezoid(|_, v| v)
    }

    pub fn mean(&self) -> f64 {
        self.trapezoid(|t, v| t * v)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.trapezoid(|t, v| (t - m).powi(2) * v)
    }

    /// Piecewise-linear interpolation of the cumulative integral.
    pub fn cdf_at(&self, x: f64) -> f64 {
        let n = self.theta.len();
        if x <= self.theta[0] {
            return 0.0;
        }
        if x >= self.theta[n - 1] {
            return 1.0;
        }
        let i = self.theta.partition_point(|&t| t <= x);
        let (t0, t1) = (self.theta[i - 1], self.theta[i]);
        let w = (x - t0) / (t1 - t0);
        self.cdf[i - 1] + w * (self.cdf[i] - self.cdf[i - 1])
    }

    /// Inverse of [`cdf_at`](Self::cdf_at).
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        let n = self.theta.len();
        if u <= 0.0 {
            return self.theta[0];
        }
        if u >= 1.0 {
            return self.theta[n - 1];
        }
        let i = self.cdf.partition_point(|&c| c < u).clamp(1, n - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.theta[i - 1] + w * (self.theta[i] - self.theta[i - 1])
    }

    /// Inverse-CDF draws.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.inverse_cdf(open_unit(rng))).collect()
    }
}

/// Default number of grid points.
pub const DEFAULT_GRID_POINTS: usize = 20_001;

/// Grid bounds covering the central 0.9998 mass of both the prior and the
/// naive conjugate posterior, padded by 20% of the width on each side.
pub fn default_grid_bounds(setting: &GpSetting) -> (f64, f64) {
    let prior = prior_law(setting);
    let mut lo = prior.quantile(1e-4);
    let mut hi = prior.quantile(1.0 - 1e-4);
    if let Ok(naive) = naive_conjugate_posterior(setting) {
        lo = lo.min(naive.quantile(1e-4));
        hi = hi.max(naive.quantile(1.0 - 1e-4));
    }
    let pad = 0.2 * (hi - lo);
    ((lo - pad).max(1e-6), hi + pad)
}

/// Closed-form posterior normalized on the default grid.
pub fn true_posterior_grid(setting: &GpSetting, n_points: usize) -> Result<DensityGrid> {
    let (lo, hi) = default_grid_bounds(setting);
    Ok(normalize_log_on_grid(|t| ln_posterior_unnorm_closed(setting, t), lo, hi, n_points)?
        .with_label("true_posterior"))
}

/// Prior, naive conjugate posterior and true posterior on one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorComparison {
    pub prior: DensityGrid,
    pub naive: DensityGrid,
    pub true_posterior: DensityGrid,
}

pub fn posterior_comparison(setting: &GpSetting, n_points: usize) -> Result<PosteriorComparison> {
    let (lo, hi) = default_grid_bounds(setting);
    let prior = prior_law(setting);
    let naive = naive_conjugate_posterior(setting)?;
    Ok(PosteriorComparison {
        prior: normalize_log_on_grid(|t| Ok(prior.ln_pdf(t)), lo, hi, n_points)?.with_label("prior"),
        naive: normalize_log_on_grid(|t| Ok(naive.ln_pdf(t)), lo, hi, n_points)?.with_label("naive"),
        true_posterior: true_posterior_grid(setting, n_points)?,
    })
}

/// Evidence `pi(s_obs)` (a density in `s_obs`) by trapezoid quadrature of the
/// brute-force integrand over the default grid.
pub fn evidence(setting: &GpSetting, n_points: usize) -> Result<f64> {
    let (lo, hi) = default_grid_bounds(setting);
    check_grid(lo, hi, n_points)?;
    let theta = linspace(lo, hi, n_points);
    let values = theta
        .iter()
        .map(|&t| brute_force_unnorm(setting, t))
        .collect::<Result<Vec<f64>>>()?;
    Ok(theta
        .windows(2)
        .zip(values.windows(2))
        .map(|(t, v)| 0.5 * (v[0] + v[1]) * (t[1] - t[0]))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ratio_cv(setting: &GpSetting, thetas: &[f64]) -> f64 {
        let ratios: Vec<f64> = thetas
            .iter()
            .map(|&t| {
                (ln_posterior_unnorm_closed(setting, t).unwrap()
                    - ln_brute_force_unnorm(setting, t).unwrap())
                .exp()
            })
            .collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let sd = (ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        sd / mean
    }

    #[test]
    fn shape_one_is_exponential() {
        assert_relative_eq!(
            upper_incomplete_gamma_int(1, 2.0).unwrap(),
            (-2.0f64).exp(),
            max_relative = 1e-15
        );
        assert!((upper_incomplete_gamma_int(1, 2.0).unwrap() - 0.135335).abs() < 1e-6);
    }

    #[test]
    fn zero_argument_is_one() {
        for n in [1, 2, 38, 500] {
            assert_eq!(upper_incomplete_gamma_int(n, 0.0).unwrap(), 1.0);
            assert_eq!(lower_incomplete_gamma_int(n, 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_shape_rejected() {
        assert!(matches!(upper_incomplete_gamma_int(0, 1.0), Err(Error::Domain(_))));
        assert!(upper_incomplete_gamma_int(3, -1.0).is_err());
    }

    #[test]
    fn incomplete_gamma_matches_quadrature() {
        // Q(38, x) = int_x^inf r^37 e^-r dr / 37!, Simpson on [x, x + 400]
        let n = 38u64;
        let x = 37.4 * 0.2f64.exp();
        let ln_37_fact = ln_gamma(38.0);
        let f = |r: f64| (37.0 * r.ln() - r - ln_37_fact).exp();
        let intervals = 400_000;
        let h = 400.0 / intervals as f64;
        let mut acc = f(x) + f(x + 400.0);
        for i in 1..intervals {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x + i as f64 * h);
        }
        let quad = acc * h / 3.0;
        let q = upper_incomplete_gamma_int(n, x).unwrap();
        assert_relative_eq!(q, quad, max_relative = 1e-10);
    }

    #[test]
    fn lower_and_upper_complement() {
        for (n, x) in [(5u64, 0.3), (38, 20.0), (38, 44.0), (38, 120.0), (200, 150.0)] {
            let p = lower_incomplete_gamma_int(n, x).unwrap();
            let q = upper_incomplete_gamma_int(n, x).unwrap();
            // log-space sums at magnitude ~600 carry ~1e-13 absolute error
            assert!((p + q - 1.0).abs() < 1e-12, "n {n} x {x}: {p} + {q}");
            let reference = statrs::function::gamma::gamma_lr(n as f64, x);
            assert_relative_eq!(p, reference, max_relative = 1e-9);
        }
    }

    #[test]
    fn closed_form_matches_brute_force_up_to_constant() {
        let cv = ratio_cv(&GpSetting::reference(), &[10.0, 20.0, 30.0, 37.4, 50.0, 80.0]);
        assert!(cv < 1e-8, "cv {cv}");
    }

    #[test]
    fn closed_form_handles_negative_and_integer_observations() {
        let thetas = [0.5, 3.0, 10.0, 25.0, 60.0];
        for s_obs in [-7.3, -1.0, 0.0, 0.4, 37.0] {
            let setting = GpSetting::new(25.0, 1.0, 0.2, s_obs).unwrap();
            let cv = ratio_cv(&setting, &thetas);
            assert!(cv < 1e-8, "s_obs {s_obs}: cv {cv}");
        }
    }

    #[test]
    fn closed_form_vanishes_at_origin() {
        let s = GpSetting::reference();
        assert!(posterior_unnorm_closed(&s, 1e-8).unwrap() < 1e-100);
        assert!(ln_posterior_unnorm_closed(&s, 0.0).is_err());
    }

    #[test]
    fn brute_force_far_from_observation() {
        let s = GpSetting::reference();
        for t in [0.01, 500.0] {
            let v = ln_brute_force_unnorm(&s, t).unwrap();
            assert!(v.is_finite());
        }
    }

    #[test]
    fn truncation_is_converged() {
        let s = GpSetting::reference();
        for t in [5.0, 37.4, 90.0] {
            let smax = default_truncation(&s, t);
            let a = ln_brute_force_unnorm_truncated(&s, t, smax).unwrap();
            let b = ln_brute_force_unnorm_truncated(&s, t, 2 * smax).unwrap();
            assert!((a - b).abs() < 1e-10, "theta {t}");
        }
    }

    #[test]
    fn grid_normalizes_gamma_prior() {
        let prior = GammaLaw {
            shape: 25.0,
            rate: 1.0,
        };
        let g = normalize_on_grid(|t| prior.ln_pdf(t).exp(), 0.0, 120.0, 10_000).unwrap();
        assert!((g.integral() - 1.0).abs() < 1e-6);
        assert!((g.mean() - 25.0).abs() < 1e-3);
    }

    #[test]
    fn constant_function_is_uniform() {
        let g = normalize_on_grid(|_| 3.0, 2.0, 6.0, 101).unwrap();
        assert!(g.values.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!((g.cdf_at(3.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_function_is_degenerate() {
        assert!(normalize_on_grid(|_| 0.0, 0.0, 1.0, 10).is_err());
        assert!(normalize_on_grid(|_| 1.0, 1.0, 0.0, 10).is_err());
    }

    #[test]
    fn inverse_cdf_round_trip() {
        let g = true_posterior_grid(&GpSetting::reference(), 2001).unwrap();
        let spacing = g.theta[1] - g.theta[0];
        for t in [15.0, 22.5, 28.0, 33.3, 41.0] {
            assert!((g.inverse_cdf(g.cdf_at(t)) - t).abs() <= spacing);
        }
    }

    #[test]
    fn naive_posterior_reference_setting() {
        let law = naive_conjugate_posterior(&GpSetting::reference()).unwrap();
        assert_relative_eq!(law.shape, 62.4, max_relative = 1e-15);
        assert_eq!(law.rate, 2.0);
        assert_relative_eq!(law.mean(), 31.2, max_relative = 1e-15);
        let zero = naive_conjugate_posterior(&GpSetting::new(25.0, 1.0, 0.2, 0.0).unwrap()).unwrap();
        assert_eq!((zero.shape, zero.rate), (25.0, 2.0));
        assert!(naive_conjugate_posterior(&GpSetting::new(2.0, 1.0, 0.2, -5.0).unwrap()).is_err());
    }

    #[test]
    fn naive_posterior_understates_uncertainty() {
        let s = GpSetting::reference();
        let truth = true_posterior_grid(&s, DEFAULT_GRID_POINTS).unwrap();
        let naive = naive_conjugate_posterior(&s).unwrap();
        assert!(naive.variance() < truth.variance());
    }

    #[test]
    fn posterior_moments_stable_under_refinement() {
        let s = GpSetting::reference();
        let coarse = true_posterior_grid(&s, DEFAULT_GRID_POINTS).unwrap();
        let fine = true_posterior_grid(&s, 2 * DEFAULT_GRID_POINTS - 1).unwrap();
        assert!(((coarse.mean() - fine.mean()) / fine.mean()).abs() < 1e-5);
        assert!(((coarse.variance() - fine.variance()) / fine.variance()).abs() < 1e-5);
    }

    #[test]
    fn comparison_densities_share_grid_and_normalize() {
        let fig = posterior_comparison(&GpSetting::reference(), DEFAULT_GRID_POINTS).unwrap();
        for g in [&fig.prior, &fig.naive, &fig.true_posterior] {
            assert!((g.integral() - 1.0).abs() < 1e-6, "{}", g.label);
            assert_eq!(g.theta, fig.prior.theta);
        }
    }

    #[test]
    fn large_epsilon_posterior_approaches_noiseless_conjugate() {
        // KL(true || naive) with s_obs an integer, so the noiseless count is exact
        let s = GpSetting::new(25.0, 1.0, 20.0, 37.0).unwrap();
        let truth = true_posterior_grid(&s, DEFAULT_GRID_POINTS).unwrap();
        let naive = naive_conjugate_posterior(&s).unwrap();
        let ln_norm = {
            let (lo, hi) = default_grid_bounds(&s);
            normalize_log_on_grid(|t| Ok(naive.ln_pdf(t)), lo, hi, DEFAULT_GRID_POINTS).unwrap()
        };
        let kl: f64 = truth
            .theta
            .windows(2)
            .zip(truth.values.windows(2).zip(ln_norm.values.windows(2)))
            .map(|(t, (p, q))| {
                let term = |p: f64, q: f64| if p > 0.0 { p * (p / q).ln() } else { 0.0 };
                0.5 * (term(p[0], q[0]) + term(p[1], q[1])) * (t[1] - t[0])
            })
            .sum();
        assert!(kl < 1e-2, "kl {kl}");
    }

    #[test]
    fn mle_oracle_reference_values() {
        let o = mle_oracle(&GpSetting::reference(), 1.0, 100.0).unwrap();
        assert!((o.argmax - 37.237).abs() < 1e-3, "argmax {}", o.argmax);
        assert!(
            ((o.neg_second_derivative - 1.582e-2) / 1.582e-2).abs() < 0.02,
            "info {}",
            o.neg_second_derivative
        );
    }

    #[test]
    fn mle_oracle_near_noiseless() {
        // integer observation: the sharp kernel pins the latent count to s_obs
        let s = GpSetting::new(25.0, 1.0, 20.0, 37.0).unwrap();
        let o = mle_oracle(&s, 1.0, 100.0).unwrap();
        assert!((o.argmax - 37.0).abs() < 1e-3, "argmax {}", o.argmax);
        // non-integer 37.4: latent count concentrates on 37 (independent
        // truncated-sum optimisation in scipy gives 37.01753)
        let s = GpSetting::new(25.0, 1.0, 20.0, 37.4).unwrap();
        let o = mle_oracle(&s, 1.0, 100.0).unwrap();
        assert!((o.argmax - 37.0175).abs() < 1e-3, "argmax {}", o.argmax);
    }

    #[test]
    fn latent_moments_match_closed_form_tilt() {
        // eps -> 0 limit: weights flat, conditional law is the Poisson itself
        let s = GpSetting::new(1.0, 1.0, 1e-9, 37.4).unwrap();
        let m = latent_moments(&s, 12.0).unwrap();
        assert!((m.mean - 12.0).abs() < 1e-6);
        assert!((m.variance - 12.0).abs() < 1e-6);
    }
}
