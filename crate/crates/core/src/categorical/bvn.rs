//! Standard bivariate normal CDF.
//!
//! Uses the angle form
//!
//! ```text
//! Φ₂(a, b; ρ) = Φ(a)Φ(b) + 1/(2π) ∫₀^{asin ρ} exp(−(a² + b² − 2ab sin t) / (2 cos² t)) dt
//! ```
//!
//! whose integrand is bounded by 1 and smooth on the closed interval for
//! `|ρ| < 1`. Adaptive Simpson quadrature runs to an absolute tolerance of
//! 1e-13 on the integral, starting from 16 panels.

use std::f64::consts::PI;

use crate::error::{CfaError, Result};
use crate::normal;

const TOLERANCE: f64 = 1e-13;
const INITIAL_PANELS: usize = 16;
const MAX_DEPTH: u32 = 40;

/// `P(Z₁ ≤ a, Z₂ ≤ b)` for standard normals with correlation `rho`.
///
/// Infinite limits are allowed; `|rho|` must be below 1.
pub fn bivariate_normal_cdf(a: f64, b: f64, rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(CfaError::InvalidArgument(format!(
            "correlation must satisfy |rho| < 1, got {}",
            rho
        )));
    }
    if a.is_nan() || b.is_nan() {
        return Err(CfaError::InvalidArgument("limit is NaN".into()));
    }
    Ok(bvn(a, b, rho))
}

/// Unchecked variant; callers guarantee `|rho| < 1` and non-NaN limits.
pub(crate) fn bvn(a: f64, b: f64, rho: f64) -> f64 {
    if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
        return 0.0;
    }
    if a == f64::INFINITY {
        return normal::cdf(b);
    }
    if b == f64::INFINITY {
        return normal::cdf(a);
    }
    let independent = normal::cdf(a) * normal::cdf(b);
    if rho == 0.0 {
        return independent;
    }
    let ss = a * a + b * b;
    let ab = a * b;
    let g = |t: f64| {
        let (s, c) = t.sin_cos();
        (-(ss - 2.0 * ab * s) / (2.0 * c * c)).exp()
    };
    let upper = rho.asin();
    let integral = integrate(&g, 0.0, upper);
    (independent + integral / (2.0 * PI)).clamp(0.0, 1.0)
}

fn integrate<G: Fn(f64) -> f64>(g: &G, lo: f64, hi: f64) -> f64 {
    let h = (hi - lo) / INITIAL_PANELS as f64;
    let tol = TOLERANCE / INITIAL_PANELS as f64;
    (0..INITIAL_PANELS)
        .map(|k| {
            let a = lo + k as f64 * h;
            let b = if k + 1 == INITIAL_PANELS { hi } else { a + h };
            let m = 0.5 * (a + b);
            let (fa, fm, fb) = (g(a), g(m), g(b));
            let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
            simpson(g, a, b, fa, fm, fb, whole, tol, MAX_DEPTH)
        })
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn simpson<G: Fn(f64) -> f64>(
    g: &G,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (g(lm), g(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(g, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson(g, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
