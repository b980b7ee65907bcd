//! One-dimensional maximization and root bracketing.

use crate::error::{Error, Result};

const INV_PHI: f64 = 0.618_033_988_749_894_9;
const MAX_EXPANSIONS: usize = 40;

/// Golden-section search for the maximum of a unimodal `f` on `[lo, hi]`.
pub fn golden_section_max<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> f64 {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Maximizes `f` starting from `[lo, hi]`, widening the bracket while the
/// maximum sits on an edge. Fails when widening runs off the domain of `f`.
pub fn maximize_bracketed<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut a, mut b) = check_bracket(lo, hi)?;
    for _ in 0..MAX_EXPANSIONS {
        let x = golden_section_max(&f, a, b, tol);
        let width = b - a;
        let edge = 4.0 * tol;
        if x - a > edge && b - x > edge {
            return Ok(x);
        }
        if x - a <= edge {
            let next = a - width;
            if !f(next).is_finite() {
                return Err(Error::Bracket { lo, hi });
            }
            a = next;
        } else {
            let next = b + width;
            if !f(next).is_finite() {
                return Err(Error::Bracket { lo, hi });
            }
            b = next;
        }
    }
    Err(Error::Bracket { lo, hi })
}

/// Root of a decreasing `g` (a score) by bisection, widening the bracket
/// until `g(lo) > 0 > g(hi)`.
pub fn decreasing_root<G: Fn(f64) -> f64>(g: G, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut a, mut b) = check_bracket(lo, hi)?;
    let mut expansions = 0;
    loop {
        let (ga, gb) = (g(a), g(b));
        if !(ga.is_finite() && gb.is_finite()) {
            return Err(Error::Bracket { lo, hi });
        }
        if ga > 0.0 && gb < 0.0 {
            break;
        }
        if ga == 0.0 {
            return Ok(a);
        }
        if gb == 0.0 {
            return Ok(b);
        }
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            return Err(Error::Bracket { lo, hi });
        }
        let width = b - a;
        if ga <= 0.0 {
            a -= width;
        } else {
            b += width;
        }
    }
    while b - a > tol {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let gm = g(mid);
        if gm > 0.0 {
            a = mid;
        } else if gm < 0.0 {
            b = mid;
        } else {
            return Ok(mid);
        }
    }
    Ok(0.5 * (a + b))
}

/// Refines a maximizer found by bracketing with Newton steps on difference
/// quotients of `f`. Golden section stalls near `sqrt(machine epsilon)`
/// relative accuracy because `f` is flat at its peak. The slope here is a
/// Richardson combination of two central differences, so its truncation
/// error is fourth order in the step.
pub fn polish_maximum<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    let mut x = x;
    for _ in 0..8 {
        let h = 1e-3 * x.abs().max(1.0);
        let fx = f(x);
        let (lo, hi) = (f(x - h), f(x + h));
        let (lo2, hi2) = (f(x - 0.5 * h), f(x + 0.5 * h));
        let coarse = (hi - lo) / (2.0 * h);
        let fine = (hi2 - lo2) / h;
        let slope = (4.0 * fine - coarse) / 3.0;
        let curvature = (hi - 2.0 * fx + lo) / (h * h);
        if !(curvature < 0.0 && slope.is_finite()) {
            break;
        }
        let step = -slope / curvature;
        if step.abs() > h {
            break;
        }
        // no function-value test: at the peak, rounding noise in f exceeds
        // the true improvement
        x += step;
        if step.abs() <= 1e-14 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

fn check_bracket(lo: f64, hi: f64) -> Result<(f64, f64)> {
    if lo.is_finite() && hi.is_finite() && lo < hi {
        Ok((lo, hi))
    } else {
        Err(Error::Bracket { lo, hi })
    }
}
