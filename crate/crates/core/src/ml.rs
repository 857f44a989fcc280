//! Maximum-likelihood covariance-structure fitting.
//!
//! Minimizes `F = ln|Σ| − ln|S| + tr(SΣ⁻¹) − p` over the free structural
//! parameters with the box-constrained optimizer in [`crate::optim`].
//! Intercepts do not enter `F`; they are reported as the sample means when
//! the means are known.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::datagen::Dataset;
use crate::error::{CfaError, Result};
use crate::linalg::{cholesky_factor, inverse_from_factor, is_symmetric, log_det_from_factor};
use crate::model::{
    build_parameter_layout, layout_clip_start, IdentificationStrategy, LoadingRef, ModelMatrices,
    ModelSpec, Param, ParameterLayout, ParameterVector, Role, DEFAULT_LOADING_START,
};
use crate::optim::{minimize_box, Objective, OptimizerSettings};

pub use crate::optim::numerical_gradient;

/// How free loadings are started.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum StartPolicy {
    /// Every free loading starts at 0.5.
    #[default]
    EngineDefault,
    UniformLoading(f64),
    PerLoading(BTreeMap<LoadingRef, f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub start_policy: StartPolicy,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            start_policy: StartPolicy::EngineDefault,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            step_tolerance: 1e-10,
        }
    }
}

impl FitOptions {
    pub fn with_starts(start_policy: StartPolicy) -> Self {
        Self {
            start_policy,
            ..Self::default()
        }
    }

    pub(crate) fn settings(&self) -> Result<OptimizerSettings> {
        if !(self.gradient_tolerance > 0.0) || !(self.step_tolerance > 0.0) {
            return Err(CfaError::InvalidArgument(
                "tolerances must be positive".into(),
            ));
        }
        Ok(OptimizerSettings {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            step_tolerance: self.step_tolerance,
            max_halvings: 30,
        })
    }
}

/// Second moments of the data, plus means when available.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMoments {
    pub covariance: DMatrix<f64>,
    pub means: Option<DVector<f64>>,
    pub n: usize,
}

impl SampleMoments {
    pub fn from_covariance(covariance: DMatrix<f64>, n: usize) -> Self {
        Self {
            covariance,
            means: None,
            n,
        }
    }

    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        Ok(Self {
            covariance: crate::datagen::sample_covariance(data)?,
            means: Some(data.means()),
            n: data.n(),
        })
    }
}

/// Outcome of one model fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub layout: ParameterLayout,
    /// Free parameter values, layout order.
    pub theta: ParameterVector,
    pub matrices: ModelMatrices,
    pub discrepancy: f64,
    pub start_discrepancy: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_inf_norm: f64,
    /// Labels of free parameters resting on a bound.
    pub active_bounds: Vec<String>,
    /// Free loadings estimated at exactly zero (counted as positive).
    pub zero_loadings: Vec<String>,
    pub message: String,
}

impl FitResult {
    pub fn loading(&self, r: &LoadingRef) -> Option<f64> {
        match self.layout.loading_param(r)? {
            Param::Loading { factor, indicator } => {
                Some(self.matrices.loadings[(indicator, factor)])
            }
            _ => None,
        }
    }

    /// `(indicator, estimate, fixed)` for each loading of `factor`.
    pub fn factor_loadings(&self, factor: &str) -> Vec<(String, f64, bool)> {
        let Some(k) = self.layout.factors.iter().position(|f| f == factor) else {
            return Vec::new();
        };
        self.layout
            .entries
            .iter()
            .filter_map(|e| match e.param {
                Param::Loading { factor, indicator } if factor == k => Some((
                    self.layout.indicators[indicator].clone(),
                    self.matrices.loadings[(indicator, factor)],
                    e.fixed.is_some(),
                )),
                _ => None,
            })
            .collect()
    }

    /// `(label, value, fixed)` for every layout entry.
    pub fn estimates(&self) -> Vec<(String, f64, bool)> {
        self.layout
            .entries
            .iter()
            .zip(self.layout.resolve(&self.theta))
            .map(|(e, v)| (e.label.clone(), v, e.fixed.is_some()))
            .collect()
    }

    pub fn implied_covariance(&self) -> DMatrix<f64> {
        self.matrices.covariance()
    }
}

/// `F = ln|Σ| − ln|S| + tr(SΣ⁻¹) − p`.
pub fn ml_discrepancy(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if s.shape() != sigma.shape() || !s.is_square() {
        return Err(CfaError::DimensionMismatch(format!(
            "S is {:?}, Sigma is {:?}",
            s.shape(),
            sigma.shape()
        )));
    }
    let ls = cholesky_factor(s).map_err(|_| CfaError::SampleNotPositiveDefinite)?;
    let lsig = cholesky_factor(sigma).map_err(|_| CfaError::SingularImplied)?;
    Ok(ml_value(s, log_det_from_factor(&ls), &lsig))
}

fn ml_value(s: &DMatrix<f64>, ln_det_s: f64, lsig: &DMatrix<f64>) -> f64 {
    let p = s.nrows();
    // tr(SΣ⁻¹) = tr(L⁻¹ S L⁻ᵀ)
    let solved = lsig
        .solve_lower_triangular(s)
        .expect("positive diagonal");
    let z = lsig
        .solve_lower_triangular(&solved.transpose())
        .expect("positive diagonal");
    let trace = z.trace();
    log_det_from_factor(lsig) - ln_det_s + trace - p as f64
}

/// Maps the optimizer's coordinates onto a full free-parameter vector.
///
/// Only structural parameters are optimized; intercepts (and, for
/// latent-response fits, residual variances) stay pinned.
#[derive(Debug, Clone)]
pub(crate) struct StructuralMap<'a> {
    pub layout: &'a ParameterLayout,
    pub optimized: Vec<usize>,
    pub base: Vec<f64>,
}

impl<'a> StructuralMap<'a> {
    pub fn new(layout: &'a ParameterLayout, base: Vec<f64>, pinned: &[Role]) -> Self {
        let optimized = (0..layout.n_free())
            .filter(|&i| !pinned.contains(&layout.free_entry(i).role()))
            .collect();
        Self {
            layout,
            optimized,
            base,
        }
    }

    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut theta = self.base.clone();
        for (k, &i) in self.optimized.iter().enumerate() {
            theta[i] = x[k];
        }
        theta
    }

    pub fn reduce(&self, theta: &[f64]) -> Vec<f64> {
        self.optimized.iter().map(|&i| theta[i]).collect()
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let lower = self
            .optimized
            .iter()
            .map(|&i| self.layout.free_entry(i).lower)
            .collect();
        let upper = self
            .optimized
            .iter()
            .map(|&i| self.layout.free_entry(i).upper)
            .collect();
        (lower, upper)
    }

    pub fn matrices(&self, x: &[f64]) -> ModelMatrices {
        ModelMatrices::from_layout(self.layout, &self.expand(x)).expect("layout-sized vector")
    }

    /// Chain rule from `dF = tr(K dΣ)` (symmetric `K`) to the optimized
    /// coordinates.
    pub fn gradient(&self, mats: &ModelMatrices, kernel: &DMatrix<f64>) -> Vec<f64> {
        let klp = kernel * &mats.loadings * &mats.factor_cov;
        let lkl = mats.loadings.transpose() * kernel * &mats.loadings;
        self.optimized
            .iter()
            .map(|&i| match self.layout.free_entry(i).param {
                Param::Loading { factor, indicator } => 2.0 * klp[(indicator, factor)],
                Param::FactorVariance(k) => lkl[(k, k)],
                Param::FactorCovariance(k, l) => lkl[(k, l)] + lkl[(l, k)],
                Param::ResidualVariance(x) => kernel[(x, x)],
                Param::Intercept(_) => 0.0,
            })
            .collect()
    }
}

struct MlObjective<'a> {
    map: StructuralMap<'a>,
    s: &'a DMatrix<f64>,
    ln_det_s: f64,
}

impl<'a> MlObjective<'a> {
    fn sigma_factor(&self, x: &[f64]) -> Option<(ModelMatrices, DMatrix<f64>, DMatrix<f64>)> {
        let mats = self.map.matrices(x);
        let sigma = mats.covariance();
        let l = cholesky_factor(&sigma).ok()?;
        Some((mats, sigma, l))
    }
}

impl Objective for MlObjective<'_> {
    fn dim(&self) -> usize {
        self.map.optimized.len()
    }

    fn value(&self, x: &[f64]) -> Option<f64> {
        let (_, _, l) = self.sigma_factor(x)?;
        Some(ml_value(self.s, self.ln_det_s, &l))
    }

    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (mats, _, l) = self.sigma_factor(x)?;
        let f = ml_value(self.s, self.ln_det_s, &l);
        let inv = inverse_from_factor(&l);
        // dF = tr((Σ⁻¹ − Σ⁻¹ S Σ⁻¹) dΣ)
        let kernel = &inv - &inv * self.s * &inv;
        let kernel = (&kernel + kernel.transpose()) * 0.5;
        Some((f, self.map.gradient(&mats, &kernel)))
    }
}

/// Value and analytic gradient of the ML discrepancy with respect to every
/// free parameter of `layout` (intercept entries get zero).
pub fn ml_value_and_gradient(
    layout: &ParameterLayout,
    s: &DMatrix<f64>,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if theta.len() != layout.n_free() {
        return Err(CfaError::DimensionMismatch("theta length".into()));
    }
    let ls = cholesky_factor(s).map_err(|_| CfaError::SampleNotPositiveDefinite)?;
    let obj = MlObjective {
        map: StructuralMap::new(layout, theta.to_vec(), &[]),
        s,
        ln_det_s: log_det_from_factor(&ls),
    };
    obj.value_and_gradient(theta)
        .ok_or(CfaError::SingularImplied)
}

/// Start vector for `layout`: policy-driven loadings (explicit `start`
/// directives win), residual variances at half the observed variances,
/// free factor variances at 1. Everything is moved inside its bounds.
pub fn default_start_values(
    layout: &ParameterLayout,
    policy: &StartPolicy,
    s: &DMatrix<f64>,
) -> Result<ParameterVector> {
    let p = layout.n_indicators();
    if s.shape() != (p, p) {
        return Err(CfaError::DimensionMismatch(format!(
            "S is {:?}, model has {} indicators",
            s.shape(),
            p
        )));
    }
    layout
        .free_entries()
        .map(|e| {
            let raw = match e.param {
                Param::Loading { factor, indicator } if !e.user_start => match policy {
                    StartPolicy::EngineDefault => DEFAULT_LOADING_START,
                    StartPolicy::UniformLoading(v) => *v,
                    StartPolicy::PerLoading(map) => {
                        let r = LoadingRef::new(
                            &layout.factors[factor],
                            &layout.indicators[indicator],
                        );
                        *map.get(&r).ok_or_else(|| CfaError::MissingStart(r.to_string()))?
                    }
                },
                Param::ResidualVariance(x) => 0.5 * s[(x, x)],
                _ => e.start,
            };
            Ok(layout_clip_start(raw, e.lower, e.upper))
        })
        .collect()
}

fn check_sample(s: &DMatrix<f64>, p: usize) -> Result<()> {
    if s.shape() != (p, p) {
        return Err(CfaError::DimensionMismatch(format!(
            "sample covariance is {:?}, model has {} indicators",
            s.shape(),
            p
        )));
    }
    if !is_symmetric(s, 1e-10 * s.amax().max(1.0)) {
        return Err(CfaError::Data("sample covariance is not symmetric".into()));
    }
    Ok(())
}

pub(crate) fn tied_zero_loadings(layout: &ParameterLayout, theta: &[f64]) -> Vec<String> {
    layout
        .free_entries()
        .zip(theta)
        .filter(|(e, v)| e.role() == Role::Loading && **v == 0.0)
        .map(|(e, _)| e.label.clone())
        .collect()
}

pub(crate) fn active_labels(map: &StructuralMap, active: &[usize]) -> Vec<String> {
    active
        .iter()
        .map(|&k| map.layout.free_entry(map.optimized[k]).label.clone())
        .collect()
}

/// Fits `spec` to a sample covariance by maximum likelihood.
///
/// Returns a local minimizer of `F` within the spec's bounds. A fit that
/// stops before convergence is still returned, with `converged == false`.
pub fn fit_ml(
    spec: &ModelSpec,
    strategy: &IdentificationStrategy,
    moments: &SampleMoments,
    options: &FitOptions,
) -> Result<FitResult> {
    let settings = options.settings()?;
    let layout = build_parameter_layout(spec, strategy, &options.start_policy)?;
    let s = &moments.covariance;
    check_sample(s, layout.n_indicators())?;
    let ls = cholesky_factor(s).map_err(|_| CfaError::SampleNotPositiveDefinite)?;

    let mut start = default_start_values(&layout, &options.start_policy, s)?;
    if let Some(means) = &moments.means {
        if means.len() != layout.n_indicators() {
            return Err(CfaError::DimensionMismatch("means length".into()));
        }
        for (i, e) in layout.free_entries().enumerate() {
            if let Param::Intercept(x) = e.param {
                start[i] = means[x];
            }
        }
    }

    let objective = MlObjective {
        map: StructuralMap::new(&layout, start.clone(), &[Role::Intercept]),
        s,
        ln_det_s: log_det_from_factor(&ls),
    };
    let (lower, upper) = objective.map.bounds();
    let x0 = objective.map.reduce(&start);
    let report = minimize_box(&objective, &x0, &lower, &upper, &settings).map_err(|_| {
        CfaError::Estimation("implied covariance is not positive definite at the start values".into())
    })?;

    let theta = objective.map.expand(&report.x);
    let matrices = objective.map.matrices(&report.x);
    let active_bounds = active_labels(&objective.map, &report.active);
    let zero_loadings = tied_zero_loadings(&layout, &theta);
    Ok(FitResult {
        matrices,
        discrepancy: report.value,
        start_discrepancy: report.start_value,
        converged: report.converged,
        iterations: report.iterations,
        gradient_inf_norm: report.gradient_inf_norm,
        active_bounds,
        zero_loadings,
        message: report.message,
        theta,
        layout,
    })
}

/// [`fit_ml`] on raw continuous data.
pub fn fit_ml_dataset(
    spec: &ModelSpec,
    strategy: &IdentificationStrategy,
    data: &Dataset,
    options: &FitOptions,
) -> Result<FitResult> {
    let data = data.select(&spec.indicators.iter().map(|x| x.name.as_str()).collect::<Vec<_>>())?;
    fit_ml(spec, strategy, &SampleMoments::from_dataset(&data)?, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{implied_covariance, parse_model_text};

    fn spec3() -> ModelSpec {
        parse_model_text("F =~ x1 + x2 + x3").unwrap()
    }

    fn population(loadings: [f64; 3]) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                s[(i, j)] = if i == j { 1.0 } else { loadings[i] * loadings[j] };
            }
        }
        s
    }

    #[test]
    fn discrepancy_zero_at_equality() {
        let s = population([0.7, 0.6, 0.5]);
        assert!(ml_discrepancy(&s, &s).unwrap().abs() < 1e-14);
    }

    #[test]
    fn discrepancy_scalar_hand_case() {
        // ln 1 − ln 2 + 2·1 − 1
        let f = ml_discrepancy(&DMatrix::from_element(1, 1, 2.0), &DMatrix::from_element(1, 1, 1.0))
            .unwrap();
        assert!((f - (1.0 - 2f64.ln())).abs() < 1e-15);
        assert!((f - 0.30685).abs() < 1e-5);
    }

    #[test]
    fn discrepancy_errors_are_distinct() {
        let s = DMatrix::identity(2, 2);
        let singular = DMatrix::from_element(2, 2, 1.0);
        assert_eq!(ml_discrepancy(&s, &singular), Err(CfaError::SingularImplied));
        assert_eq!(
            ml_discrepancy(&singular, &s),
            Err(CfaError::SampleNotPositiveDefinite)
        );
    }

    #[test]
    fn start_policies() {
        let s = DMatrix::identity(3, 3) * 2.0;
        let lay = build_parameter_layout(
            &spec3(),
            &IdentificationStrategy::FixedFactorVariance,
            &StartPolicy::EngineDefault,
        )
        .unwrap();
        let loadings = |v: Vec<f64>| v[..3].to_vec();
        assert_eq!(
            loadings(default_start_values(&lay, &StartPolicy::UniformLoading(1.0), &s).unwrap()),
            vec![1.0; 3]
        );
        assert_eq!(
            loadings(default_start_values(&lay, &StartPolicy::UniformLoading(-1.0), &s).unwrap()),
            vec![-1.0; 3]
        );
        let d = default_start_values(&lay, &StartPolicy::EngineDefault, &s).unwrap();
        assert_eq!(loadings(d.clone()), vec![0.5; 3]);
        assert_eq!(&d[3..6], &[1.0, 1.0, 1.0]);

        let mut map = BTreeMap::new();
        map.insert(LoadingRef::new("F", "x1"), -1.0);
        map.insert(LoadingRef::new("F", "x2"), 1.0);
        assert_eq!(
            default_start_values(&lay, &StartPolicy::PerLoading(map.clone()), &s),
            Err(CfaError::MissingStart("F.x3".into()))
        );
        map.insert(LoadingRef::new("F", "x3"), 1.0);
        assert_eq!(
            loadings(default_start_values(&lay, &StartPolicy::PerLoading(map), &s).unwrap()),
            vec![-1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn starts_clipped_into_bounds() {
        let spec = parse_model_text("F =~ x1 + x2 + x3\nbound F.x1 lower 0").unwrap();
        let lay = build_parameter_layout(
            &spec,
            &IdentificationStrategy::FixedFactorVariance,
            &StartPolicy::EngineDefault,
        )
        .unwrap();
        let d = default_start_values(&lay, &StartPolicy::UniformLoading(-1.0), &DMatrix::identity(3, 3))
            .unwrap();
        assert_eq!(&d[..3], &[0.1, -1.0, -1.0]);
    }

    #[test]
    fn exact_fit_recovery() {
        let s = population([0.7, 0.7, 0.7]);
        let fit = fit_ml(
            &spec3(),
            &IdentificationStrategy::FixedFactorVariance,
            &SampleMoments::from_covariance(s, 200),
            &FitOptions::with_starts(StartPolicy::UniformLoading(1.0)),
        )
        .unwrap();
        assert!(fit.converged, "{}", fit.message);
        assert!(fit.discrepancy < 1e-10);
        for (_, v, _) in fit.factor_loadings("F") {
            assert!((v - 0.7).abs() < 1e-5, "{v}");
        }
        for i in 0..3 {
            assert!((fit.matrices.residuals[i] - 0.51).abs() < 1e-5);
        }
    }

    #[test]
    fn negative_starts_give_negative_solution() {
        let s = population([-0.7, -0.7, -0.7]);
        let fit = fit_ml(
            &spec3(),
            &IdentificationStrategy::FixedFactorVariance,
            &SampleMoments::from_covariance(s, 200),
            &FitOptions::with_starts(StartPolicy::UniformLoading(-1.0)),
        )
        .unwrap();
        assert!(fit.converged);
        assert!(fit.factor_loadings("F").iter().all(|(_, v, _)| *v < 0.0));
    }

    #[test]
    fn anchor_propagates_covariance_sign() {
        for truth in [[0.7, 0.7, 0.7], [0.7, -0.7, 0.7], [-0.7, 0.7, -0.7]] {
            let s = population(truth);
            let fit = fit_ml(
                &spec3(),
                &IdentificationStrategy::anchor("F", "x1"),
                &SampleMoments::from_covariance(s.clone(), 200),
                &FitOptions::default(),
            )
            .unwrap();
            assert!(fit.converged);
            for (j, (_, v, fixed)) in fit.factor_loadings("F").into_iter().enumerate() {
                if !fixed {
                    assert_eq!(v.signum(), s[(0, j)].signum());
                }
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let spec = parse_model_text("F =~ a + b + c\nG =~ d + e + c").unwrap();
        let lay = build_parameter_layout(
            &spec,
            &IdentificationStrategy::anchor("F", "a").clone(),
            &StartPolicy::EngineDefault,
        );
        assert!(lay.is_err());
        let lay = build_parameter_layout(
            &spec,
            &IdentificationStrategy::FixedAnchorLoading(vec![
                LoadingRef::new("F", "a"),
                LoadingRef::new("G", "d"),
            ]),
            &StartPolicy::EngineDefault,
        )
        .unwrap();
        let mut s = DMatrix::<f64>::identity(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    s[(i, j)] = 0.3 + 0.02 * (i + j) as f64;
                }
            }
        }
        let theta: Vec<f64> = (0..lay.n_free())
            .map(|i| match lay.free_entry(i).role() {
                Role::ResidualVariance => 0.4 + 0.1 * i as f64 / 10.0,
                Role::FactorVariance => 0.8,
                Role::FactorCovariance => 0.2,
                _ => 0.6 - 0.05 * i as f64,
            })
            .collect();
        let (_, g) = ml_value_and_gradient(&lay, &s, &theta).unwrap();
        let num = numerical_gradient(
            |t| ml_discrepancy(&s, &implied_covariance(&lay, t).unwrap()).unwrap(),
            &theta,
            1e-6,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&num) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }
}
