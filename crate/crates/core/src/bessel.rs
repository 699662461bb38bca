//! Bessel functions of the first kind and their positive zeros.
//!
//! `J_m(x)` is evaluated with the ascending series for small arguments and
//! with Miller's downward recurrence, normalised by `J_0 + 2 Σ J_2k = 1`,
//! everywhere else. Both paths are accurate to roughly 1e-14 absolute for
//! the orders and arguments the bases need.

use crate::error::{DcfError, Result};

/// Highest supported order `m` for [`bessel_j`] and [`bessel_root`].
pub const MAX_ORDER: usize = 32;
/// Highest supported zero index `q` for [`bessel_root`].
pub const MAX_ZERO_INDEX: usize = 64;

const SERIES_CUTOFF: f64 = 2.0;
const RESCALE_ABOVE: f64 = 1e250;

/// `J_m(x)` for `0 <= m <= 32` and `x >= 0`.
pub fn bessel_j(m: usize, x: f64) -> Result<f64> {
    check_order(m)?;
    if !(x >= 0.0) || !x.is_finite() {
        return Err(DcfError::invalid(format!(
            "Bessel argument must be finite and non-negative, got {x}"
        )));
    }
    Ok(jn(m, x))
}

/// `J_m'(x)` via `(J_{m-1} - J_{m+1}) / 2` (and `-J_1` for `m = 0`).
pub fn bessel_j_derivative(m: usize, x: f64) -> Result<f64> {
    check_order(m)?;
    if !(x >= 0.0) || !x.is_finite() {
        return Err(DcfError::invalid(format!(
            "Bessel argument must be finite and non-negative, got {x}"
        )));
    }
    Ok(jn_prime(m, x))
}

/// The `q`-th positive zero `R_{m,q}` of `J_m`.
///
/// Zeros are bracketed by a sign-change scan starting at `x = m` (no zero of
/// `J_m` lies below `m`), with a step well under the minimal zero spacing,
/// then refined by bisection and a final Newton polish.
pub fn bessel_root(m: usize, q: usize) -> Result<f64> {
    check_order(m)?;
    if q == 0 || q > MAX_ZERO_INDEX {
        return Err(DcfError::invalid(format!(
            "zero index q must be in 1..={MAX_ZERO_INDEX}, got {q}"
        )));
    }
    Ok(root_unchecked(m, q))
}

fn check_order(m: usize) -> Result<()> {
    if m > MAX_ORDER {
        return Err(DcfError::UnsupportedOrder {
            order: m,
            ceiling: MAX_ORDER,
        });
    }
    Ok(())
}

fn root_unchecked(m: usize, q: usize) -> f64 {
    // consecutive zeros of J_m are more than 3 apart for every m >= 0
    let step = std::f64::consts::FRAC_PI_4;
    let mut lo = (m as f64).max(1e-3);
    let mut f_lo = jn(m, lo);
    let mut found = 0;
    loop {
        let hi = lo + step;
        let f_hi = jn(m, hi);
        if f_hi == 0.0 {
            found += 1;
            if found == q {
                return hi;
            }
        } else if f_lo * f_hi < 0.0 {
            found += 1;
            if found == q {
                return refine_root(m, lo, hi, f_lo);
            }
        }
        lo = hi;
        f_lo = f_hi;
    }
}

fn refine_root(m: usize, mut lo: f64, mut hi: f64, mut f_lo: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = jn(m, mid);
        if f_mid == 0.0 {
            return mid;
        }
        if f_lo * f_mid < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            f_lo = f_mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..2 {
        let d = jn_prime(m, x);
        if d == 0.0 {
            break;
        }
        let next = x - jn(m, x) / d;
        if (next - x).abs() > 1e-10 {
            break;
        }
        x = next;
    }
    x
}

pub(crate) fn jn_prime(m: usize, x: f64) -> f64 {
    if m == 0 {
        -jn(1, x)
    } else {
        0.5 * (jn(m - 1, x) - jn(m + 1, x))
    }
}

/// Unchecked `J_m(x)` for `x >= 0`.
pub(crate) fn jn(m: usize, x: f64) -> f64 {
    if x == 0.0 {
        return if m == 0 { 1.0 } else { 0.0 };
    }
    if x <= SERIES_CUTOFF {
        series(m, x)
    } else {
        miller(m, x)
    }
}

fn series(m: usize, x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = 1.0;
    for i in 1..=m {
        term *= half / i as f64;
    }
    let q = -half * half;
    let mut sum = term;
    for k in 1..200 {
        term *= q / (k as f64 * (k + m) as f64);
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum
}

fn miller(m: usize, x: f64) -> f64 {
    let top = (m as f64).max(x);
    let mut start = (top + 30.0 + 4.0 * top.sqrt()) as usize;
    start += start % 2;
    let two_over_x = 2.0 / x;
    let mut next = 0.0; // J_{k+1}
    let mut cur = 1e-30; // J_k
    let mut norm = 0.0;
    let mut wanted = 0.0;
    for k in (1..=start).rev() {
        if k == m {
            wanted = cur;
        }
        if k % 2 == 0 {
            norm += 2.0 * cur;
        }
        let prev = k as f64 * two_over_x * cur - next;
        next = cur;
        cur = prev;
        if cur.abs() > RESCALE_ABOVE {
            cur /= RESCALE_ABOVE;
            next /= RESCALE_ABOVE;
            norm /= RESCALE_ABOVE;
            wanted /= RESCALE_ABOVE;
        }
    }
    // cur now holds J_0
    norm += cur;
    if m == 0 {
        wanted = cur;
    }
    wanted / norm
}
