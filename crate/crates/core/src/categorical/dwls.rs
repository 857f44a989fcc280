//! Diagonally weighted least-squares fitting to polychoric correlations.
//!
//! Latent responses have unit variance, so only the correlations above the
//! diagonal carry information; thresholds are saturated and fit exactly.
//! Residual variances are not free: each is `1 − (ΛΦΛ')_ii`.

use nalgebra::{DMatrix, DVector};

use super::polychoric::{lower_free, PolychoricSummary};
use crate::error::{CfaError, Result};
use crate::ml::{active_labels, default_start_values, tied_zero_loadings, FitOptions, FitResult, StructuralMap};
use crate::model::{build_parameter_layout, IdentificationStrategy, ModelMatrices, ModelSpec, Param, Role};
use crate::optim::{minimize_box, Objective};

/// `Σ_k (s_k − σ_k)² / W_k`.
pub fn wls_discrepancy(s: &[f64], sigma: &[f64], weights: &[f64]) -> Result<f64> {
    if s.len() != sigma.len() || s.len() != weights.len() {
        return Err(CfaError::DimensionMismatch(format!(
            "lengths {}, {}, {}",
            s.len(),
            sigma.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(CfaError::InvalidArgument("weights must be positive".into()));
    }
    Ok(s
        .iter()
        .zip(sigma)
        .zip(weights)
        .map(|((a, b), w)| (a - b) * (a - b) / w)
        .sum())
}

struct DwlsObjective<'a> {
    map: StructuralMap<'a>,
    r: &'a DMatrix<f64>,
    w: &'a DMatrix<f64>,
}

impl DwlsObjective<'_> {
    /// Residual matrix `r − ΛΦΛ'` off the diagonal.
    fn residuals(&self, mats: &ModelMatrices) -> DMatrix<f64> {
        let mut e = self.r - mats.common_covariance();
        e.fill_diagonal(0.0);
        e
    }
}

impl Objective for DwlsObjective<'_> {
    fn dim(&self) -> usize {
        self.map.optimized.len()
    }

    fn value(&self, x: &[f64]) -> Option<f64> {
        let e = self.residuals(&self.map.matrices(x));
        let f = 0.5 * e.component_mul(&e).component_div(self.w).sum();
        f.is_finite().then_some(f)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let mats = self.map.matrices(x);
        let e = self.residuals(&mats);
        let f = 0.5 * e.component_mul(&e).component_div(self.w).sum();
        // dF = tr(K dΣ) with K_ij = −e_ij / w_ij off the diagonal
        let kernel = -e.component_div(self.w);
        f.is_finite()
            .then(|| (f, self.map.gradient(&mats, &kernel)))
    }
}

/// Fits `spec` to a polychoric summary by minimizing the weighted squared
/// correlation residuals.
///
/// Every indicator of `spec` must be ordinal and present in the summary;
/// the summary may list its variables in any order.
pub fn fit_dwls(
    spec: &ModelSpec,
    summary: &PolychoricSummary,
    options: &FitOptions,
    strategy: &IdentificationStrategy,
) -> Result<FitResult> {
    if !spec.all_ordinal() {
        return Err(CfaError::InvalidModel(
            "weighted least-squares fitting needs every indicator ordinal".into(),
        ));
    }
    let settings = options.settings()?;
    let layout = build_parameter_layout(spec, strategy, &options.start_policy)?;
    let (r, w) = aligned_moments(spec, summary)?;

    let start = default_start_values(&layout, &options.start_policy, &r)?;
    let objective = DwlsObjective {
        map: StructuralMap::new(&layout, start.clone(), &[Role::Intercept, Role::ResidualVariance]),
        r: &r,
        w: &w,
    };
    let (lower, upper) = objective.map.bounds();
    let x0 = objective.map.reduce(&start);
    let report = minimize_box(&objective, &x0, &lower, &upper, &settings)
        .map_err(|e| CfaError::Estimation(e.to_string()))?;

    let mut theta = objective.map.expand(&report.x);
    let mut matrices = objective.map.matrices(&report.x);
    let common = matrices.common_covariance();
    let mut message = report.message.clone();
    for (i, e) in layout.free_entries().enumerate() {
        match e.param {
            Param::ResidualVariance(x) => {
                theta[i] = 1.0 - common[(x, x)];
                if theta[i] < 0.0 {
                    message.push_str(&format!("; negative residual for {}", layout.indicators[x]));
                }
            }
            Param::Intercept(_) => theta[i] = 0.0,
            _ => {}
        }
    }
    for x in 0..layout.n_indicators() {
        matrices.residuals[x] = 1.0 - common[(x, x)];
        matrices.intercepts[x] = 0.0;
    }
    let active_bounds = active_labels(&objective.map, &report.active);
    let zero_loadings = tied_zero_loadings(&layout, &theta);
    let discrepancy = report.value;
    Ok(FitResult {
        matrices,
        discrepancy,
        start_discrepancy: report.start_value,
        converged: report.converged,
        iterations: report.iterations,
        gradient_inf_norm: report.gradient_inf_norm,
        active_bounds,
        zero_loadings,
        message,
        theta,
        layout,
    })
}

/// Correlation and weight matrices in the spec's indicator order.
fn aligned_moments(spec: &ModelSpec, summary: &PolychoricSummary) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let p = summary.p();
    if summary.weight_diag.len() != p * (p - 1) / 2 {
        return Err(CfaError::DimensionMismatch("weight vector length".into()));
    }
    if summary.weight_diag.iter().any(|w| !(*w > 0.0)) {
        return Err(CfaError::InvalidArgument("weights must be positive".into()));
    }
    let mut full_w = DMatrix::from_element(p, p, 1.0);
    let mut k = 0;
    for i in 0..p {
        for j in (i + 1)..p {
            full_w[(i, j)] = summary.weight_diag[k];
            full_w[(j, i)] = summary.weight_diag[k];
            k += 1;
        }
    }
    let idx = spec
        .indicators
        .iter()
        .map(|x| {
            summary
                .variables
                .iter()
                .position(|v| *v == x.name)
                .ok_or_else(|| CfaError::DimensionMismatch(format!("`{}` not in summary", x.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let q = idx.len();
    let r = DMatrix::from_fn(q, q, |a, b| summary.correlation[(idx[a], idx[b])]);
    let w = DMatrix::from_fn(q, q, |a, b| full_w[(idx[a], idx[b])]);
    Ok((r, w))
}

/// Implied correlations above the diagonal for a fitted model.
pub fn implied_correlation_vector(fit: &FitResult) -> DVector<f64> {
    lower_free(&fit.matrices.covariance())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::ThresholdSet;
    use crate::ml::StartPolicy;
    use crate::model::{parse_model_text, LoadingRef};
    use crate::optim::numerical_gradient;

    fn ordinal_spec(p: usize) -> ModelSpec {
        let names: Vec<String> = (1..=p).map(|i| format!("x{}", i)).collect();
        let ordinal: Vec<String> = names.iter().map(|x| format!("ordinal {} 2", x)).collect();
        let text = format!("F =~ {}\n{}", names.join(" + "), ordinal.join("\n"));
        parse_model_text(&text).unwrap()
    }

    fn population_summary(loadings: &[f64]) -> PolychoricSummary {
        let p = loadings.len();
        let r = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { loadings[i] * loadings[j] });
        PolychoricSummary::new(
            (1..=p).map(|i| format!("x{}", i)).collect(),
            ThresholdSet::uniform(p, &[0.0]).unwrap(),
            r,
        )
        .unwrap()
    }

    #[test]
    fn discrepancy_hand_cases() {
        assert_eq!(wls_discrepancy(&[0.3, 0.2], &[0.3, 0.2], &[1.0, 1.0]).unwrap(), 0.0);
        let f = wls_discrepancy(&[0.1, -0.1], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((f - 0.02).abs() < 1e-15);
        let f = wls_discrepancy(&[0.1, 0.1], &[0.0, 0.0], &[4.0, 1.0]).unwrap();
        assert!((f - 0.0125).abs() < 1e-15);
        assert!(wls_discrepancy(&[0.1], &[0.0, 0.0], &[1.0]).is_err());
        assert!(wls_discrepancy(&[0.1], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn exact_fit_recovery() {
        let fit = fit_dwls(
            &ordinal_spec(4),
            &population_summary(&[0.7; 4]),
            &FitOptions::default(),
            &IdentificationStrategy::FixedFactorVariance,
        )
        .unwrap();
        assert!(fit.converged, "{}", fit.message);
        assert!(fit.discrepancy < 1e-12);
        for (_, l, _) in fit.factor_loadings("F") {
            assert!((l - 0.7).abs() < 1e-5);
        }
        for x in 0..4 {
            assert!((fit.matrices.residuals[x] - 0.51).abs() < 1e-5);
        }
    }

    #[test]
    fn implied_diagonal_is_one() {
        let fit = fit_dwls(
            &ordinal_spec(3),
            &population_summary(&[0.8, 0.5, 0.6]),
            &FitOptions::default(),
            &IdentificationStrategy::FixedFactorVariance,
        )
        .unwrap();
        let sigma = fit.implied_covariance();
        for i in 0..3 {
            assert!((sigma[(i, i)] - 1.0).abs() < 1e-12);
        }
        assert!(sigma.iter().all(|v| v.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn negative_starts_give_mirrored_solution() {
        let spec = ordinal_spec(4);
        let summary = population_summary(&[0.7, 0.6, 0.5, 0.4]);
        let strategy = IdentificationStrategy::FixedFactorVariance;
        let pos = fit_dwls(&spec, &summary, &FitOptions::default(), &strategy).unwrap();
        let neg = fit_dwls(
            &spec,
            &summary,
            &FitOptions::with_starts(StartPolicy::UniformLoading(-0.5)),
            &strategy,
        )
        .unwrap();
        for ((_, a, _), (_, b, _)) in pos.factor_loadings("F").iter().zip(neg.factor_loadings("F")) {
            assert!(*a > 0.0 && b < 0.0);
            assert!((a + b).abs() < 1e-5);
        }
        assert!((pos.discrepancy - neg.discrepancy).abs() < 1e-10);
    }

    #[test]
    fn summary_order_is_irrelevant() {
        let spec = ordinal_spec(3);
        let s = population_summary(&[0.8, 0.5, 0.6]);
        let perm = [2usize, 0, 1];
        let shuffled = PolychoricSummary::new(
            perm.iter().map(|&i| s.variables[i].clone()).collect(),
            ThresholdSet::uniform(3, &[0.0]).unwrap(),
            DMatrix::from_fn(3, 3, |a, b| s.correlation[(perm[a], perm[b])]),
        )
        .unwrap();
        let o = FitOptions::default();
        let st = IdentificationStrategy::FixedFactorVariance;
        let a = fit_dwls(&spec, &s, &o, &st).unwrap();
        let b = fit_dwls(&spec, &shuffled, &o, &st).unwrap();
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn requires_ordinal_indicators() {
        let spec = parse_model_text("F =~ x1 + x2 + x3").unwrap();
        assert!(matches!(
            fit_dwls(
                &spec,
                &population_summary(&[0.7; 3]),
                &FitOptions::default(),
                &IdentificationStrategy::FixedFactorVariance
            ),
            Err(CfaError::InvalidModel(_))
        ));
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let spec = parse_model_text(
            "F =~ x1 + x2 + x3\nG =~ x4 + x5 + x6\nordinal x1 2\nordinal x2 2\nordinal x3 2\n\
             ordinal x4 2\nordinal x5 2\nordinal x6 2",
        )
        .unwrap();
        let loadings = [0.7, 0.6, 0.5, 0.6, 0.7, 0.8];
        let mut r = DMatrix::from_fn(6, 6, |i, j| {
            let same = (i < 3) == (j < 3);
            let phi = if same { 1.0 } else { 0.3 };
            if i == j { 1.0 } else { phi * (loadings[i] * loadings[j]) }
        });
        r[(0, 5)] += 0.05;
        r[(5, 0)] += 0.05;
        let summary = PolychoricSummary::new(
            (1..=6).map(|i| format!("x{}", i)).collect(),
            ThresholdSet::uniform(6, &[0.0]).unwrap(),
            r.clone(),
        )
        .unwrap()
        .with_weights(DVector::from_fn(15, |k, _| 1.0 + k as f64 / 10.0))
        .unwrap();
        let strategy = IdentificationStrategy::FixedAnchorLoading(vec![
            LoadingRef::new("F", "x1"),
            LoadingRef::new("G", "x4"),
        ]);
        let layout = build_parameter_layout(&spec, &strategy, &StartPolicy::EngineDefault).unwrap();
        let (r, w) = aligned_moments(&spec, &summary).unwrap();
        let base = default_start_values(&layout, &StartPolicy::EngineDefault, &r).unwrap();
        let obj = DwlsObjective {
            map: StructuralMap::new(&layout, base.clone(), &[Role::Intercept, Role::ResidualVariance]),
            r: &r,
            w: &w,
        };
        let x: Vec<f64> = obj
            .map
            .reduce(&base)
            .iter()
            .enumerate()
            .map(|(k, v)| v + 0.05 * k as f64)
            .collect();
        let (_, g) = obj.value_and_gradient(&x).unwrap();
        let num = numerical_gradient(|y| obj.value(y).unwrap(), &x, 1e-6).unwrap();
        for (a, b) in g.iter().zip(&num) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }
}
