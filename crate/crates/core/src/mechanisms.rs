//! Sensitivity calculus and additive perturbation mechanisms.
//!
//! An additive mechanism releases `S = s + h u` where `u` has a known,
//! zero-mean density `eta` on `R^p` and `h > 0` is a bandwidth calibrated from
//! the privacy budget and the query's sensitivity. Three calibrations ship:
//!
//! * `laplace-eps`: Laplace noise, `h = GS / epsilon`, pure epsilon-DP.
//! * `laplace-smooth`: Laplace noise, `h = SS_xi / epsilon`, (epsilon, delta)-DP.
//! * `gaussian`: normal noise, `h = 5 sqrt(2 ln(2/delta)) SS_xi / epsilon`.
//!
//! Smooth sensitivity is computed from a user-supplied `radius_max(k)`, the
//! largest local sensitivity over datasets at Hamming distance `k` from the
//! observed one. The search over `k` is truncated at `k_max`, and the result
//! carries a flag saying whether the global sensitivity certifies that no
//! larger term exists beyond the truncation point.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngkit::{sample_standard_laplace, sample_standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::Domain(format!("delta must lie in [0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    /// Pure epsilon-DP budget (`delta = 0`).
    pub fn pure(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, 0.0)
    }

    pub fn is_pure(&self) -> bool {
        self.delta == 0.0
    }
}

/// How the `d` in `xi = epsilon / (4 (d + ln(2/delta)))` is read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum XiDimensionTerm {
    /// `d` is the query dimension `p`.
    QueryDimension,
    /// `d` is a fixed constant.
    Fixed(f64),
}

/// The reading used by [`make_smooth_laplace`] and [`make_gaussian`].
pub const XI_DIMENSION_TERM: XiDimensionTerm = XiDimensionTerm::QueryDimension;

/// Smoothing rate `xi` for a query of dimension `p`.
pub fn smoothing_rate(budget: &PrivacyBudget, p: usize) -> f64 {
    let d = match XI_DIMENSION_TERM {
        XiDimensionTerm::QueryDimension => p as f64,
        XiDimensionTerm::Fixed(d) => d,
    };
    budget.epsilon / (4.0 * (d + (2.0 / budget.delta).ln()))
}

type RadiusFn = dyn Fn(u64) -> Option<f64> + Send + Sync;

/// Sensitivity information about a query at one observed dataset.
#[derive(Clone)]
pub struct SensitivityProfile {
    global: Option<f64>,
    local: Option<f64>,
    radius_max: Arc<RadiusFn>,
}

impl fmt::Debug for SensitivityProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SensitivityProfile")
            .field("global", &self.global)
            .field("local", &self.local)
            .finish_non_exhaustive()
    }
}

impl SensitivityProfile {
    pub fn new<F>(global: Option<f64>, radius_max: F) -> Self
    where
        F: Fn(u64) -> Option<f64> + Send + Sync + 'static,
    {
        Self {
            global,
            local: None,
            radius_max: Arc::new(radius_max),
        }
    }

    /// Counting query: every local sensitivity, and the global one, equal 1.
    pub fn counting() -> Self {
        Self::constant(1.0)
    }

    /// Query whose local sensitivity is `value` at every dataset.
    pub fn constant(value: f64) -> Self {
        Self::new(Some(value), move |_| Some(value))
    }

    /// `radius_max(k) = table[k]`, undefined past the end of the table.
    pub fn from_table(global: Option<f64>, table: Vec<f64>) -> Self {
        Self::new(global, move |k| table.get(k as usize).copied())
    }

    /// Records the local sensitivity at the observed dataset when it is known
    /// separately from `radius_max(0)`.
    pub fn with_local(mut self, local: f64) -> Self {
        self.local = Some(local);
        self
    }

    pub fn global(&self) -> Option<f64> {
        self.global
    }

    pub fn local(&self) -> Option<f64> {
        self.local.or_else(|| (self.radius_max)(0))
    }

    pub fn radius_max(&self, k: u64) -> Option<f64> {
        (self.radius_max)(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothSensitivity {
    pub value: f64,
    /// Distance at which the maximum was attained.
    pub argmax: u64,
    /// True when `exp(-xi k_max) GS <= value`, i.e. the truncated search is exact.
    pub truncation_valid: bool,
}

/// `max_{0 <= k <= k_max} exp(-xi k) radius_max(k)`.
pub fn smooth_sensitivity(
    profile: &SensitivityProfile,
    xi: f64,
    k_max: u64,
) -> Result<SmoothSensitivity> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::Domain(format!("xi must be positive, got {xi}")));
    }
    let mut best = SmoothSensitivity {
        value: 0.0,
        argmax: 0,
        truncation_valid: false,
    };
    for k in 0..=k_max {
        let a = profile.radius_max(k).ok_or(Error::IncompleteProfile(k))?;
        if !(a >= 0.0 && a.is_finite()) {
            return Err(Error::InconsistentProfile(format!(
                "radius_max({k}) = {a} is not a nonnegative number"
            )));
        }
        if let Some(g) = profile.global {
            if a > g {
                return Err(Error::InconsistentProfile(format!(
                    "radius_max({k}) = {a} exceeds the global sensitivity {g}"
                )));
            }
        }
        let term = (-xi * k as f64).exp() * a;
        if term > best.value {
            best.value = term;
            best.argmax = k;
        }
    }
    best.truncation_valid = profile
        .global
        .is_some_and(|g| (-xi * k_max as f64).exp() * g <= best.value);
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelFamily {
    Laplace,
    Gaussian,
}

/// Product noise density on `R^p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKernel {
    pub family: KernelFamily,
    pub dimension: usize,
}

impl NoiseKernel {
    pub fn new(family: KernelFamily, dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidDimension("kernel dimension must be at least 1".into()));
        }
        Ok(Self { family, dimension })
    }

    pub fn laplace(dimension: usize) -> Result<Self> {
        Self::new(KernelFamily::Laplace, dimension)
    }

    pub fn gaussian(dimension: usize) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, dimension)
    }

    pub fn log_density(&self, u: &[f64]) -> f64 {
        let p = u.len() as f64;
        match self.family {
            KernelFamily::Laplace => -p * std::f64::consts::LN_2 - u.iter().map(|x| x.abs()).sum::<f64>(),
            KernelFamily::Gaussian => {
                -0.5 * p * (std::f64::consts::TAU).ln() - 0.5 * u.iter().map(|x| x * x).sum::<f64>()
            }
        }
    }

    pub fn density(&self, u: &[f64]) -> f64 {
        self.log_density(u).exp()
    }

    /// `log eta(a / h) - log eta(b / h)` for one coordinate, formed from the
    /// unscaled offsets so the normalizing constant never enters.
    pub fn log_ratio_1d(&self, a: f64, b: f64, h: f64) -> f64 {
        match self.family {
            KernelFamily::Laplace => (b.abs() - a.abs()) / h,
            KernelFamily::Gaussian => (b - a) * (b + a) / (2.0 * h * h),
        }
    }

    pub fn log_mode_density(&self) -> f64 {
        self.log_density(&vec![0.0; self.dimension])
    }

    /// `max eta`, the reciprocal of the rejection constant `c`.
    pub fn mode_density(&self) -> f64 {
        self.log_mode_density().exp()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let draw = match self.family {
            KernelFamily::Laplace => sample_standard_laplace(rng, self.dimension),
            KernelFamily::Gaussian => sample_standard_normal(rng, self.dimension),
        };
        draw.expect("kernel dimension validated at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MechanismKind {
    #[serde(rename = "laplace-eps")]
    LaplaceEps,
    #[serde(rename = "laplace-smooth")]
    LaplaceSmooth,
    #[serde(rename = "gaussian")]
    Gaussian,
}

impl MechanismKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MechanismKind::LaplaceEps => "laplace-eps",
            MechanismKind::LaplaceSmooth => "laplace-smooth",
            MechanismKind::Gaussian => "gaussian",
        }
    }
}

/// Serializable description of a mechanism.
///
/// `gs` is the sensitivity the bandwidth was calibrated from: the global
/// sensitivity for `laplace-eps`, the smooth sensitivity for the other kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub kind: MechanismKind,
    pub epsilon: f64,
    pub delta: f64,
    pub gs: f64,
    pub p: usize,
}

impl MechanismSpec {
    pub fn build(&self) -> Result<AdditiveMechanism> {
        let budget = PrivacyBudget::new(self.epsilon, self.delta)?;
        match self.kind {
            MechanismKind::LaplaceEps => make_epsilon_laplace(budget, self.gs, self.p),
            MechanismKind::LaplaceSmooth => {
                make_smooth_laplace(budget, &SensitivityProfile::constant(self.gs), self.p, 0)
            }
            MechanismKind::Gaussian => {
                make_gaussian(budget, &SensitivityProfile::constant(self.gs), self.p, 0)
            }
        }
    }
}

impl fmt::Display for MechanismSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(epsilon={}, delta={}, gs={}, p={})",
            self.kind.as_str(),
            self.epsilon,
            self.delta,
            self.gs,
            self.p
        )
    }
}

/// `S = s + h u`, `u ~ kernel`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveMechanism {
    kernel: NoiseKernel,
    bandwidth: f64,
    budget: PrivacyBudget,
    kind: MechanismKind,
    sensitivity: f64,
}

impl AdditiveMechanism {
    pub fn new(
        kernel: NoiseKernel,
        bandwidth: f64,
        budget: PrivacyBudget,
        kind: MechanismKind,
        sensitivity: f64,
    ) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Domain(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self {
            kernel,
            bandwidth,
            budget,
            kind,
            sensitivity,
        })
    }

    pub fn kernel(&self) -> &NoiseKernel {
        &self.kernel
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn budget(&self) -> PrivacyBudget {
        self.budget
    }

    pub fn kind(&self) -> MechanismKind {
        self.kind
    }

    pub fn dimension(&self) -> usize {
        self.kernel.dimension
    }

    pub fn spec(&self) -> MechanismSpec {
        MechanismSpec {
            kind: self.kind,
            epsilon: self.budget.epsilon,
            delta: self.budget.delta,
            gs: self.sensitivity,
            p: self.kernel.dimension,
        }
    }

    fn scaled_residual(&self, s_obs: &[f64], s: &[f64]) -> Vec<f64> {
        s_obs
            .iter()
            .zip(s)
            .map(|(o, x)| (o - x) / self.bandwidth)
            .collect()
    }

    /// `ln eta((s_obs - s) / h)`, without the `h^-p` Jacobian.
    pub fn log_kernel_weight(&self, s_obs: &[f64], s: &[f64]) -> f64 {
        self.kernel.log_density(&self.scaled_residual(s_obs, s))
    }

    /// `eta((s_obs - s) / h)`, the weight used by rejection and importance ABC.
    pub fn kernel_weight(&self, s_obs: &[f64], s: &[f64]) -> f64 {
        self.log_kernel_weight(s_obs, s).exp()
    }

    /// `c eta((s_obs - s) / h)` with `c = 1 / max eta`.
    pub fn acceptance_probability(&self, s_obs: &[f64], s: &[f64]) -> f64 {
        (self.log_kernel_weight(s_obs, s) - self.kernel.log_mode_density()).exp()
    }

    /// Proper conditional density `eta_obs(s_obs | s) = h^-p eta((s_obs - s) / h)`.
    pub fn log_obs_density(&self, s_obs: &[f64], s: &[f64]) -> f64 {
        self.log_kernel_weight(s_obs, s) - self.kernel.dimension as f64 * self.bandwidth.ln()
    }

    pub fn obs_density(&self, s_obs: &[f64], s: &[f64]) -> f64 {
        self.log_obs_density(s_obs, s).exp()
    }

    pub fn perturb<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        if s.len() != self.kernel.dimension {
            return Err(Error::Shape {
                expected: self.kernel.dimension,
                got: s.len(),
            });
        }
        let u = self.kernel.sample(rng);
        Ok(s.iter().zip(u).map(|(x, u)| x + self.bandwidth * u).collect())
    }
}

fn check_sensitivity(value: f64) -> Result<()> {
    if value == 0.0 {
        return Err(Error::DegenerateSensitivity);
    }
    if !(value > 0.0 && value.is_finite()) {
        return Err(Error::Domain(format!("sensitivity must be positive, got {value}")));
    }
    Ok(())
}

/// Laplace mechanism with `h = gs / epsilon`.
pub fn make_epsilon_laplace(budget: PrivacyBudget, gs: f64, p: usize) -> Result<AdditiveMechanism> {
    if !budget.is_pure() {
        return Err(Error::BudgetMismatch(format!(
            "epsilon-Laplace needs delta = 0, got {}",
            budget.delta
        )));
    }
    check_sensitivity(gs)?;
    AdditiveMechanism::new(
        NoiseKernel::laplace(p)?,
        gs / budget.epsilon,
        budget,
        MechanismKind::LaplaceEps,
        gs,
    )
}

fn calibrated_smooth_sensitivity(
    budget: &PrivacyBudget,
    profile: &SensitivityProfile,
    p: usize,
    k_max: u64,
) -> Result<f64> {
    if budget.is_pure() {
        return Err(Error::BudgetMismatch(
            "smooth-sensitivity mechanisms need delta > 0".into(),
        ));
    }
    if p == 0 {
        return Err(Error::InvalidDimension("p must be at least 1".into()));
    }
    let ss = smooth_sensitivity(profile, smoothing_rate(budget, p), k_max)?;
    check_sensitivity(ss.value)?;
    if !ss.truncation_valid {
        return Err(Error::UnverifiableSensitivity { k_max });
    }
    Ok(ss.value)
}

/// Laplace mechanism with `h = SS_xi / epsilon`.
pub fn make_smooth_laplace(
    budget: PrivacyBudget,
    profile: &SensitivityProfile,
    p: usize,
    k_max: u64,
) -> Result<AdditiveMechanism> {
    let ss = calibrated_smooth_sensitivity(&budget, profile, p, k_max)?;
    AdditiveMechanism::new(
        NoiseKernel::laplace(p)?,
        ss / budget.epsilon,
        budget,
        MechanismKind::LaplaceSmooth,
        ss,
    )
}

/// Gaussian multiplier `5 sqrt(2 ln(2/delta)) / epsilon` applied to `SS_xi`.
pub fn gaussian_bandwidth_factor(budget: &PrivacyBudget) -> f64 {
    5.0 * (2.0 * (2.0 / budget.delta).ln()).sqrt() / budget.epsilon
}

pub fn make_gaussian(
    budget: PrivacyBudget,
    profile: &SensitivityProfile,
    p: usize,
    k_max: u64,
) -> Result<AdditiveMechanism> {
    let ss = calibrated_smooth_sensitivity(&budget, profile, p, k_max)?;
    AdditiveMechanism::new(
        NoiseKernel::gaussian(p)?,
        gaussian_bandwidth_factor(&budget) * ss,
        budget,
        MechanismKind::Gaussian,
        ss,
    )
}

type CondDensityFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type CondSamplerFn = dyn Fn(&mut dyn RngCore, &[f64]) -> Vec<f64> + Send + Sync;

/// Arbitrary perturbation mechanism `S | s ~ eta_obs(. | s)`, bounded by `M`.
#[derive(Clone)]
pub struct GeneralMechanism {
    density: Arc<CondDensityFn>,
    density_bound: f64,
    sampler: Arc<CondSamplerFn>,
    label: String,
}

impl fmt::Debug for GeneralMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralMechanism")
            .field("label", &self.label)
            .field("density_bound", &self.density_bound)
            .finish_non_exhaustive()
    }
}

impl GeneralMechanism {
    pub fn new<D, S>(label: impl Into<String>, density: D, density_bound: f64, sampler: S) -> Result<Self>
    where
        D: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        S: Fn(&mut dyn RngCore, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        if !(density_bound > 0.0 && density_bound.is_finite()) {
            return Err(Error::Domain(format!(
                "density bound must be positive, got {density_bound}"
            )));
        }
        Ok(Self {
            density: Arc::new(density),
            density_bound,
            sampler: Arc::new(sampler),
            label: label.into(),
        })
    }

    /// The proper conditional density of an additive mechanism, bounded by
    /// `max eta / h^p`.
    pub fn from_additive(mech: &AdditiveMechanism) -> Self {
        let bound = (mech.kernel().log_mode_density()
            - mech.dimension() as f64 * mech.bandwidth().ln())
        .exp();
        let for_density = mech.clone();
        let for_sampler = mech.clone();
        Self {
            density: Arc::new(move |s_obs, s| for_density.obs_density(s_obs, s)),
            density_bound: bound,
            sampler: Arc::new(move |rng, s| {
                for_sampler
                    .perturb(s, rng)
                    .expect("dimension checked by caller")
            }),
            label: mech.spec().to_string(),
        }
    }

    /// Same mechanism with a different (looser or tighter) bound `M`.
    pub fn with_density_bound(mut self, bound: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::Domain(format!("density bound must be positive, got {bound}")));
        }
        self.density_bound = bound;
        Ok(self)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn conditional_density(&self, s_obs: &[f64], s: &[f64]) -> f64 {
        (self.density)(s_obs, s)
    }

    pub fn density_bound(&self) -> f64 {
        self.density_bound
    }

    pub fn sample(&self, rng: &mut dyn RngCore, s: &[f64]) -> Vec<f64> {
        (self.sampler)(rng, s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpCheck {
    pub passed: bool,
    pub max_ratio: f64,
}

/// Checks the pointwise density-ratio form of the DP inequality for neighbours
/// whose query values differ by `gs`, at every grid point `t`, in both
/// directions. Noise in coordinates other than the first is held at zero.
pub fn verify_dp_bound(mech: &AdditiveMechanism, gs: f64, grid: &[f64]) -> DpCheck {
    let h = mech.bandwidth();
    let kernel = mech.kernel();
    let max_log_ratio = grid
        .iter()
        .map(|&t| kernel.log_ratio_1d(t - gs, t, h).abs())
        .fold(0.0, f64::max);
    let max_ratio = max_log_ratio.exp();
    DpCheck {
        passed: max_ratio <= mech.budget().epsilon.exp() * (1.0 + 1e-12),
        max_ratio,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngkit::RngStream;
    use approx::assert_relative_eq;

    fn laplace(eps: f64) -> AdditiveMechanism {
        make_epsilon_laplace(PrivacyBudget::pure(eps).unwrap(), 1.0, 1).unwrap()
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(0.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(1.0, -0.1).is_err());
        assert!(PrivacyBudget::new(1.0, 0.0).unwrap().is_pure());
    }

    #[test]
    fn smooth_sensitivity_of_counting_query() {
        for xi in [0.01, 0.3, 2.0] {
            let ss = smooth_sensitivity(&SensitivityProfile::counting(), xi, 50).unwrap();
            assert_eq!(ss.value, 1.0);
            assert_eq!(ss.argmax, 0);
            assert!(ss.truncation_valid);
        }
    }

    #[test]
    fn smooth_sensitivity_constant_query_is_zero() {
        let ss = smooth_sensitivity(&SensitivityProfile::constant(0.0), 0.5, 10).unwrap();
        assert_eq!(ss.value, 0.0);
    }

    #[test]
    fn smooth_sensitivity_enumeration() {
        let profile = SensitivityProfile::from_table(Some(5.0), vec![2.0, 5.0, 1.0, 0.5]);
        let xi = std::f64::consts::LN_2;
        let ss = smooth_sensitivity(&profile, xi, 3).unwrap();
        // terms: 2, 2.5, 0.25, 0.0625
        assert_relative_eq!(ss.value, 2.5, max_relative = 1e-15);
        assert_eq!(ss.argmax, 1);
        assert!(ss.truncation_valid);
        assert!(ss.value >= profile.local().unwrap());
    }

    #[test]
    fn smooth_sensitivity_errors() {
        let profile = SensitivityProfile::from_table(Some(5.0), vec![2.0, 5.0]);
        assert!(matches!(
            smooth_sensitivity(&profile, 0.1, 2),
            Err(Error::IncompleteProfile(2))
        ));
        let bad = SensitivityProfile::from_table(Some(1.0), vec![2.0]);
        assert!(matches!(
            smooth_sensitivity(&bad, 0.1, 0),
            Err(Error::InconsistentProfile(_))
        ));
        assert!(smooth_sensitivity(&profile, 0.0, 1).is_err());
    }

    #[test]
    fn truncation_flag_without_global_is_false() {
        let profile = SensitivityProfile::from_table(None, vec![1.0, 1.0]);
        assert!(!smooth_sensitivity(&profile, 0.1, 1).unwrap().truncation_valid);
    }

    #[test]
    fn epsilon_laplace_bandwidths() {
        let m = laplace(0.2);
        assert_relative_eq!(m.bandwidth(), 5.0, max_relative = 1e-15);
        assert_eq!(m.kernel().mode_density(), 0.5);
        assert_eq!(laplace(1.0).bandwidth(), 1.0);
        let m3 = make_epsilon_laplace(PrivacyBudget::pure(0.5).unwrap(), 2.0, 3).unwrap();
        assert_eq!(m3.bandwidth(), 4.0);
        assert_relative_eq!(m3.kernel().mode_density(), 0.125, max_relative = 1e-15);
    }

    #[test]
    fn epsilon_laplace_rejects_delta() {
        let b = PrivacyBudget::new(1.0, 0.01).unwrap();
        assert!(matches!(make_epsilon_laplace(b, 1.0, 1), Err(Error::BudgetMismatch(_))));
        let pure = PrivacyBudget::pure(1.0).unwrap();
        assert!(matches!(
            make_epsilon_laplace(pure, 0.0, 1),
            Err(Error::DegenerateSensitivity)
        ));
    }

    #[test]
    fn smooth_laplace_counting_query() {
        let b = PrivacyBudget::new(1.0, 0.01).unwrap();
        let xi = smoothing_rate(&b, 1);
        assert_relative_eq!(xi, 1.0 / (4.0 * (1.0 + 200f64.ln())), max_relative = 1e-15);
        let m = make_smooth_laplace(b, &SensitivityProfile::counting(), 1, 20).unwrap();
        assert_eq!(m.bandwidth(), 1.0);
        assert_eq!(m.kind(), MechanismKind::LaplaceSmooth);
    }

    #[test]
    fn smooth_laplace_zero_sensitivity_is_degenerate() {
        let b = PrivacyBudget::new(1.0, 0.01).unwrap();
        let r = make_smooth_laplace(b, &SensitivityProfile::constant(0.0), 1, 5);
        assert!(matches!(r, Err(Error::DegenerateSensitivity)));
        let pure = PrivacyBudget::pure(1.0).unwrap();
        assert!(matches!(
            make_smooth_laplace(pure, &SensitivityProfile::counting(), 1, 5),
            Err(Error::BudgetMismatch(_))
        ));
    }

    #[test]
    fn smooth_laplace_table_profile() {
        let b = PrivacyBudget::new(1.0, 0.1).unwrap();
        let profile = SensitivityProfile::from_table(Some(5.0), vec![2.0, 5.0, 1.0]);
        let xi = 1.0 / (4.0 * (1.0 + 20f64.ln()));
        // independent enumeration
        let expected = [2.0, 5.0 * (-xi).exp(), (-2.0 * xi).exp()]
            .into_iter()
            .fold(0.0, f64::max);
        let m = make_smooth_laplace(b, &profile, 1, 2).unwrap();
        assert_relative_eq!(m.bandwidth(), expected, max_relative = 1e-14);
    }

    #[test]
    fn smooth_laplace_unverifiable_truncation() {
        let b = PrivacyBudget::new(1.0, 0.1).unwrap();
        let profile = SensitivityProfile::from_table(Some(100.0), vec![1.0, 1.0]);
        assert!(matches!(
            make_smooth_laplace(b, &profile, 1, 1),
            Err(Error::UnverifiableSensitivity { k_max: 1 })
        ));
    }

    #[test]
    fn gaussian_counting_query_bandwidth() {
        let b = PrivacyBudget::new(1.0, 0.01).unwrap();
        let m = make_gaussian(b, &SensitivityProfile::counting(), 1, 20).unwrap();
        assert_relative_eq!(m.bandwidth(), 5.0 * (2.0 * 200f64.ln()).sqrt(), max_relative = 1e-14);
        assert!((m.bandwidth() - 16.28).abs() < 0.01);
        assert_relative_eq!(
            m.kernel().mode_density(),
            1.0 / (std::f64::consts::TAU).sqrt(),
            max_relative = 1e-14
        );
        let doubled = make_gaussian(b, &SensitivityProfile::constant(2.0), 1, 20).unwrap();
        assert_relative_eq!(doubled.bandwidth(), 2.0 * m.bandwidth(), max_relative = 1e-14);
    }

    #[test]
    fn gaussian_delta_near_one_limit() {
        let b = PrivacyBudget::new(1.0, 1.0 - 1e-12).unwrap();
        let f = gaussian_bandwidth_factor(&b);
        assert_relative_eq!(f, 5.0 * (2.0 * 2f64.ln()).sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn perturb_shape_error() {
        let m = laplace(1.0);
        let mut rng = RngStream::new(0).rng();
        assert!(matches!(
            m.perturb(&[1.0, 2.0], &mut rng),
            Err(Error::Shape { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn perturb_is_unbiased_with_laplace_variance() {
        let m = laplace(0.2);
        let mut rng = RngStream::new(21).rng();
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| m.perturb(&[37.0], &mut rng).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((mean - 37.0).abs() < 4.0 * (50.0 / n as f64).sqrt(), "mean {mean}");
        assert!((mean - 37.0).abs() < 0.05);
        assert!((var - 50.0).abs() < 0.5, "var {var}");
    }

    #[test]
    fn acceptance_probability_at_mode_is_one() {
        let m = laplace(0.2);
        assert_eq!(m.acceptance_probability(&[37.4], &[37.4]), 1.0);
        assert!(m.acceptance_probability(&[37.4], &[30.0]) < 1.0);
    }

    fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, intervals: usize) -> f64 {
        let h = (hi - lo) / intervals as f64;
        let mut acc = f(lo) + f(hi);
        for i in 1..intervals {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(lo + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn kernel_normalization() {
        let b = PrivacyBudget::new(1.0, 0.01).unwrap();
        let mechs = [
            laplace(0.2),
            make_gaussian(b, &SensitivityProfile::counting(), 1, 20).unwrap(),
        ];
        for m in mechs {
            let h = m.bandwidth();
            let f = |x: f64| m.obs_density(&[x], &[0.0]);
            // split at the Laplace kink
            let mass = simpson(f, -40.0 * h, 0.0, 200_000) + simpson(f, 0.0, 40.0 * h, 200_000);
            assert!((mass - 1.0).abs() < 1e-6, "{:?} mass {mass}", m.kind());
        }
    }

    #[test]
    fn kernel_density_bounded_by_mode() {
        let mut rng = RngStream::new(3).rng();
        for k in [NoiseKernel::laplace(2).unwrap(), NoiseKernel::gaussian(3).unwrap()] {
            for _ in 0..1000 {
                let u: Vec<f64> = (0..k.dimension)
                    .map(|_| 10.0 * (crate::rngkit::open_unit(&mut rng) - 0.5))
                    .collect();
                assert!(k.density(&u) <= k.mode_density());
            }
        }
    }

    fn grid() -> Vec<f64> {
        (-1280..=1280).map(|i| i as f64 / 64.0).collect()
    }

    #[test]
    fn dp_bound_exact_at_large_epsilon() {
        for eps in [0.1, 0.2, 1.0, 5.0] {
            let check = verify_dp_bound(&laplace(eps), 1.0, &grid());
            assert!(check.passed);
            assert!((check.max_ratio - eps.exp()).abs() <= 1e-12, "{eps}: {}", check.max_ratio);
        }
    }

    #[test]
    fn dp_bound_laplace() {
        let check = verify_dp_bound(&laplace(0.2), 1.0, &grid());
        assert!(check.passed);
        assert!((check.max_ratio - 0.2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn dp_bound_identical_neighbours() {
        let check = verify_dp_bound(&laplace(0.2), 0.0, &grid());
        assert_eq!(check.max_ratio, 1.0);
        assert!(check.passed);
    }

    #[test]
    fn dp_bound_fails_for_gaussian_with_laplace_bandwidth() {
        let b = PrivacyBudget::pure(0.2).unwrap();
        let m = AdditiveMechanism::new(NoiseKernel::gaussian(1).unwrap(), 5.0, b, MechanismKind::Gaussian, 1.0)
            .unwrap();
        let check = verify_dp_bound(&m, 1.0, &grid());
        assert!(!check.passed, "max ratio {}", check.max_ratio);
    }

    #[test]
    fn spec_roundtrip_rebuilds_mechanism() {
        let b = PrivacyBudget::new(0.7, 0.05).unwrap();
        let profile = SensitivityProfile::from_table(Some(3.0), vec![1.5, 3.0, 0.2]);
        let mechs = [
            laplace(0.2),
            make_smooth_laplace(b, &profile, 2, 2).unwrap(),
            make_gaussian(b, &profile, 1, 2).unwrap(),
        ];
        for m in mechs {
            let json = serde_json::to_string(&m.spec()).unwrap();
            let back: MechanismSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, m.spec());
            let rebuilt = back.build().unwrap();
            assert_relative_eq!(rebuilt.bandwidth(), m.bandwidth(), max_relative = 1e-15);
            assert_eq!(rebuilt.kernel(), m.kernel());
        }
        let json = serde_json::to_string(&laplace(0.2).spec()).unwrap();
        assert!(json.contains("\"kind\":\"laplace-eps\""));
    }

    #[test]
    fn general_mechanism_from_additive_is_a_density() {
        let m = laplace(0.2);
        let g = GeneralMechanism::from_additive(&m);
        assert_relative_eq!(g.density_bound(), 0.1, max_relative = 1e-14);
        let f = |x: f64| g.conditional_density(&[x], &[10.0]);
        let mass = simpson(f, 10.0 - 200.0, 10.0, 200_000) + simpson(f, 10.0, 210.0, 200_000);
        assert!((mass - 1.0).abs() < 1e-6);

        let mut rng = RngStream::new(9).rng();
        let n = 200_000;
        let mean = (0..n).map(|_| g.sample(&mut rng, &[10.0])[0]).sum::<f64>() / n as f64;
        assert!((mean - 10.0).abs() < 4.0 * (50.0 / n as f64).sqrt());
    }
}
