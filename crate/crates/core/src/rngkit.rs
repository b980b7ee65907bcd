//! Reproducible random streams and the samplers used by mechanisms and models.
//!
//! Every stream is a ChaCha8 generator keyed by `seed` and positioned on the
//! 64-bit ChaCha stream `stream_id`. Workers never share a generator: they
//! derive child streams with [`RngStream::child`], so chunked parallel work
//! reproduces the serial result exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// Mean at and above which Poisson draws switch from exponential
/// interarrivals to transformed rejection.
pub const POISSON_REJECTION_THRESHOLD: f64 = 30.0;

/// Immutable descriptor of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Substream `index` of this stream. Children of distinct parents or
    /// distinct indices land on distinct ChaCha streams (up to 64-bit hash
    /// collisions).
    pub fn child(&self, index: u64) -> Self {
        let mixed = splitmix64(self.stream_id ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F)));
        Self {
            seed: self.seed,
            stream_id: mixed,
        }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw on the open interval (0, 1).
#[inline]
pub fn open_unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    // 52 bits keep the largest value, 1 - 2^-53, strictly below one
    ((rng.next_u64() >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Quantile function of the standard Laplace law.
pub fn laplace_inverse_cdf(u: f64) -> f64 {
    if u < 0.5 {
        (2.0 * u).ln()
    } else {
        -(2.0 * (1.0 - u)).ln()
    }
}

fn check_dim(p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::InvalidDimension("p must be at least 1".into()));
    }
    Ok(())
}

pub fn sample_standard_laplace<R: Rng + ?Sized>(rng: &mut R, p: usize) -> Result<Vec<f64>> {
    check_dim(p)?;
    Ok((0..p).map(|_| laplace_inverse_cdf(open_unit(rng))).collect())
}

/// Box-Muller pair of independent standard normals.
fn normal_pair<R: RngCore + ?Sized>(rng: &mut R) -> (f64, f64) {
    let r = (-2.0 * open_unit(rng).ln()).sqrt();
    let (sin, cos) = (std::f64::consts::TAU * open_unit(rng)).sin_cos();
    (r * cos, r * sin)
}

pub fn standard_normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    normal_pair(rng).0
}

pub fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R, p: usize) -> Result<Vec<f64>> {
    check_dim(p)?;
    let mut out = Vec::with_capacity(p);
    while out.len() < p {
        let (a, b) = normal_pair(rng);
        out.push(a);
        if out.len() < p {
            out.push(b);
        }
    }
    Ok(out)
}

/// Gamma(shape, rate) draw: Marsaglia-Tsang squeeze for shape >= 1, with the
/// `U^(1/shape)` boost below 1.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Domain(format!(
            "gamma parameters must be positive and finite (shape = {shape}, rate = {rate})"
        )));
    }
    Ok(gamma_unit_rate(rng, shape) / rate)
}

fn gamma_unit_rate<R: RngCore + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    if shape < 1.0 {
        let g = gamma_unit_rate(rng, shape + 1.0);
        return g * open_unit(rng).powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = standard_normal(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = open_unit(rng);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

pub fn sample_poisson<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> Result<u64> {
    if !(mean >= 0.0 && mean.is_finite()) {
        return Err(Error::Domain(format!(
            "Poisson mean must be finite and nonnegative, got {mean}"
        )));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    if mean < POISSON_REJECTION_THRESHOLD {
        Ok(poisson_interarrival(rng, mean))
    } else {
        Ok(poisson_ptrs(rng, mean))
    }
}

fn poisson_interarrival<R: RngCore + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    let mut count = 0;
    let mut clock = -open_unit(rng).ln();
    while clock <= mean {
        count += 1;
        clock -= open_unit(rng).ln();
    }
    count
}

// Hörmann's transformed rejection with squeeze (PTRS).
fn poisson_ptrs<R: RngCore + ?Sized>(rng: &mut R, mean: f64) -> u64 {
    let sqrt_mean = mean.sqrt();
    let log_mean = mean.ln();
    let b = 0.931 + 2.53 * sqrt_mean;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let v_r = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = open_unit(rng) - 0.5;
        let v = open_unit(rng);
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + mean + 0.43).floor();
        if us >= 0.07 && v <= v_r {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        let lhs = v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln();
        let rhs = -mean + k * log_mean - ln_gamma(k + 1.0);
        if lhs <= rhs {
            return k as u64;
        }
    }
}

/// Poisson quantile `min{k : P(X <= k) >= u}`, searched outward from the mode.
///
/// For a fixed `u` the result is nondecreasing in `mean`, which is what
/// common-random-number simulation across nearby means relies on.
pub fn poisson_inverse_cdf(u: f64, mean: f64) -> Result<u64> {
    if !(0.0..=MAX_POISSON_MEAN).contains(&mean) {
        return Err(Error::Domain(format!(
            "Poisson mean must lie in [0, {MAX_POISSON_MEAN:e}], got {mean}"
        )));
    }
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {u}")));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    if 1.0 - u < TAIL {
        return Ok(poisson_upper_quantile(u, mean));
    }
    if u < TAIL {
        return Ok(poisson_lower_quantile(u, mean));
    }
    let ln_mean = mean.ln();
    let mut k = mean.floor();
    let mut pmf = (k * ln_mean - mean - ln_gamma(k + 1.0)).exp();
    // P(X <= k) = Q(k + 1, mean)
    let mut cdf = gamma_ur(k + 1.0, mean);
    if u <= cdf {
        // walk down while P(X <= k - 1) still reaches u
        while k > 0.0 {
            let below = cdf - pmf;
            if u > below {
                break;
            }
            cdf = below;
            pmf *= k / mean;
            k -= 1.0;
        }
    } else {
        let cap = mean + 60.0 * mean.sqrt() + 200.0;
        while u > cdf && k < cap {
            k += 1.0;
            pmf *= mean / k;
            let next = cdf + pmf;
            if next == cdf {
                // rounding has saturated the CDF below u; k is in the far tail
                break;
            }
            cdf = next;
        }
    }
    Ok(k as u64)
}

/// Largest Poisson mean the samplers accept. Beyond this, unit steps in
/// `k` are lost to rounding.
pub const MAX_POISSON_MEAN: f64 = 1e12;

/// Smallest value [`open_unit`] can return.
pub const OPEN_UNIT_MIN: f64 = 0.5 / (1u64 << 52) as f64;

/// Within `TAIL` of 0 or 1, Poisson quantiles come from the incomplete
/// gamma function directly; running sums of the pmf cannot resolve `u` or
/// `1 - u` there.
const TAIL: f64 = 1e-8;

fn poisson_lower_quantile(u: f64, mean: f64) -> u64 {
    let mut k = mean.floor();
    // P(X <= k - 1) = Q(k, mean)
    while k > 0.0 && gamma_ur(k, mean) >= u {
        k -= 1.0;
    }
    k as u64
}

fn poisson_upper_quantile(u: f64, mean: f64) -> u64 {
    let tail = 1.0 - u;
    let mut k = mean.floor();
    // P(X > k) = P(k + 1, mean), the regularized lower incomplete gamma
    while gamma_lr(k + 1.0, mean) > tail {
        k += 1.0;
    }
    k as u64
}

/// Inverse-CDF table for repeated Poisson draws at one mean. Produces the
/// same quantile function as [`poisson_inverse_cdf`] without re-evaluating
/// the incomplete gamma function per draw. The table starts at the
/// quantile of [`OPEN_UNIT_MIN`] and ends where the CDF rounds to one.
#[derive(Debug, Clone)]
pub struct PoissonTable {
    mean: f64,
    lo: u64,
    cdf: Vec<f64>,
}

impl PoissonTable {
    pub fn new(mean: f64) -> Result<Self> {
        let lo = poisson_inverse_cdf(OPEN_UNIT_MIN, mean)?;
        let cap = (mean + 60.0 * mean.sqrt() + 200.0).floor() as u64;
        let mut cdf = Vec::new();
        if mean > 0.0 {
            for k in lo..=cap {
                let c = gamma_ur(k as f64 + 1.0, mean);
                cdf.push(c);
                if c >= 1.0 {
                    break;
                }
            }
        }
        Ok(Self { mean, lo, cdf })
    }

    /// Smallest `k` with `P(X <= k) >= u`.
    pub fn quantile(&self, u: f64) -> Result<u64> {
        if !(u >= TAIL && 1.0 - u >= TAIL) || self.cdf.last().is_none_or(|&c| u > c) {
            return poisson_inverse_cdf(u, self.mean);
        }
        Ok(self.lo + self.cdf.partition_point(|&c| c < u) as u64)
    }

    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> Result<u64> {
        self.quantile(open_unit(rng))
    }
}

/// Poisson draw by inversion of a single uniform.
pub fn sample_poisson_inversion<R: RngCore + ?Sized>(rng: &mut R, mean: f64) -> Result<u64> {
    poisson_inverse_cdf(open_unit(rng), mean)
}
