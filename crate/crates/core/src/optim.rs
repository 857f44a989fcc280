//! Box-constrained quasi-Newton minimization.
//!
//! A projected BFGS method: coordinates sitting on a bound with the gradient
//! pushing outward form the active set and are held fixed for the step, the
//! search direction uses the inverse-Hessian block of the remaining free
//! coordinates, and trial points are projected back into the box. The line
//! search is Armijo backtracking by step halving; a trial point where the
//! objective is undefined (for example a non-positive-definite implied
//! covariance) counts as a rejected step.

use crate::error::{CfaError, Result};

/// An objective that may be undefined at some points of the box.
pub trait Objective {
    fn dim(&self) -> usize;

    /// `None` when the objective is undefined at `x`.
    fn value(&self, x: &[f64]) -> Option<f64>;

    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Converged once the projected gradient infinity norm reaches this.
    pub gradient_tolerance: f64,
    /// Converged once `|Δx|∞ / max(1, |x|∞)` reaches this.
    pub step_tolerance: f64,
    pub max_halvings: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-10,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub start_value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_inf_norm: f64,
    /// Coordinates resting on a bound at the solution.
    pub active: Vec<usize>,
    pub message: String,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].max(lower[i]).min(upper[i]);
    }
}

fn active_set(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<bool> {
    (0..x.len())
        .map(|i| (x[i] <= lower[i] && g[i] > 0.0) || (x[i] >= upper[i] && g[i] < 0.0))
        .collect()
}

fn projected_inf_norm(g: &[f64], active: &[bool]) -> f64 {
    g.iter()
        .zip(active)
        .filter(|(_, a)| !**a)
        .fold(0.0, |m, (v, _)| m.max(v.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense inverse-Hessian approximation, row-major.
struct InverseHessian {
    n: usize,
    h: Vec<f64>,
    fresh: bool,
}

impl InverseHessian {
    fn identity(n: usize) -> Self {
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        Self { n, h, fresh: true }
    }

    fn reset(&mut self) {
        *self = Self::identity(self.n);
    }

    fn direction(&self, g: &[f64], active: &[bool]) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                if active[i] {
                    0.0
                } else {
                    -(0..n)
                        .filter(|&j| !active[j])
                        .map(|j| self.h[i * n + j] * g[j])
                        .sum::<f64>()
                }
            })
            .collect()
    }

    /// Standard BFGS update of the inverse; skipped unless `s'y > 0`.
    fn update(&mut self, s: &[f64], y: &[f64]) {
        let n = self.n;
        let sy = dot(s, y);
        if !(sy > 1e-14 * dot(s, s).sqrt() * dot(y, y).sqrt()) {
            return;
        }
        if self.fresh {
            let scale = sy / dot(y, y);
            for v in self.h.iter_mut() {
                *v *= scale;
            }
            self.fresh = false;
        }
        let rho = 1.0 / sy;
        let hy: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| self.h[i * n + j] * y[j]).sum())
            .collect();
        let yhy = dot(y, &hy);
        for i in 0..n {
            for j in 0..n {
                self.h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j])
                    + (rho * rho * yhy + rho) * s[i] * s[j];
            }
        }
    }
}

/// Minimizes `objective` over the box `[lower, upper]` starting from `x0`.
///
/// The start is projected into the box. Fails only when the objective is
/// undefined at the start.
pub fn minimize_box<O: Objective>(
    objective: &O,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    settings: &OptimizerSettings,
) -> Result<OptimizerReport> {
    let n = objective.dim();
    if x0.len() != n || lower.len() != n || upper.len() != n {
        return Err(CfaError::DimensionMismatch(format!(
            "optimizer dimension {} vs start {} / bounds {} {}",
            n,
            x0.len(),
            lower.len(),
            upper.len()
        )));
    }
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let (mut f, mut g) = objective.value_and_gradient(&x).ok_or_else(|| {
        CfaError::Estimation("objective undefined at the start values".into())
    })?;
    let start_value = f;
    let mut hess = InverseHessian::identity(n);
    let mut iterations = 0;
    let mut message = String::from("iteration limit reached");
    let mut converged = false;

    loop {
        let active = active_set(&x, &g, lower, upper);
        let pg = projected_inf_norm(&g, &active);
        if pg <= settings.gradient_tolerance {
            converged = true;
            message = "projected gradient within tolerance".into();
            break;
        }
        if iterations >= settings.max_iterations {
            break;
        }
        iterations += 1;

        let mut d = hess.direction(&g, &active);
        if dot(&d, &g) >= 0.0 {
            hess.reset();
            d = hess.direction(&g, &active);
        }
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut alpha = if hess.fresh && dmax > 1.0 { 1.0 / dmax } else { 1.0 };

        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
            project(&mut trial, lower, upper);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &step);
            if let Some((ft, gt)) = objective.value_and_gradient(&trial) {
                if ft.is_finite() && ft <= f + 1e-4 * decrease {
                    accepted = Some((trial, ft, gt, step));
                    break;
                }
            }
            alpha *= 0.5;
        }

        let Some((x_new, f_new, g_new, step)) = accepted else {
            if hess.fresh {
                message = "line search failed".into();
                break;
            }
            hess.reset();
            continue;
        };
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        hess.update(&step, &y);

        let step_inf = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let x_inf = x_new.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        x = x_new;
        f = f_new;
        g = g_new;
        if step_inf / x_inf <= settings.step_tolerance {
            let active = active_set(&x, &g, lower, upper);
            converged = true;
            message = if projected_inf_norm(&g, &active) <= settings.gradient_tolerance {
                "projected gradient within tolerance".into()
            } else {
                "relative step within tolerance".into()
            };
            break;
        }
    }

    let active_flags = active_set(&x, &g, lower, upper);
    let gradient_inf_norm = projected_inf_norm(&g, &active_flags);
    let active = (0..n)
        .filter(|&i| x[i] <= lower[i] || x[i] >= upper[i])
        .collect();
    Ok(OptimizerReport {
        x,
        value: f,
        start_value,
        converged,
        iterations,
        gradient_inf_norm,
        active,
        message,
    })
}

/// Central-difference gradient `(f(θ+h·e_i) − f(θ−h·e_i)) / 2h`.
pub fn numerical_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(CfaError::InvalidArgument(format!(
            "finite-difference step must be positive, got {}",
            h
        )));
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        x[i] = theta[i] + h;
        let up = f(&x);
        x[i] = theta[i] - h;
        let down = f(&x);
        x[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(CfaError::NonFinite { index: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Brent's method for a scalar function on `[a, b]`.
///
/// Returns `(x, f(x))` with `x` located to within `tol` (absolute) of a
/// local minimizer. Evaluation points stay strictly inside the interval.
pub fn minimize_scalar<F>(f: F, a: f64, b: f64, tol: f64) -> Result<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    if !(a < b) || !(tol > 0.0) {
        return Err(CfaError::InvalidArgument(format!(
            "scalar search needs a < b and tol > 0, got [{}, {}] tol {}",
            a, b, tol
        )));
    }
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a, b);
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let m = 0.5 * (a + b);
        let tol1 = f64::EPSILON.sqrt() * x.abs() * 1e-4 + tol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - m).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            // parabola through x, w, v
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            if p.abs() < (0.5 * q * e).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x < m { b - x } else { a - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Ok((x, fx))
}
