use super::{IdentificationStrategy, LoadingRef, ModelSpec, ParamStatus};
use crate::error::{CfaError, Result};
use crate::ml::StartPolicy;

/// Free parameter values in [`ParameterLayout`] order.
pub type ParameterVector = Vec<f64>;

/// Implicit lower bound on residual variances.
pub const RESIDUAL_FLOOR: f64 = 1e-6;
/// Implicit lower bound on free factor variances.
pub const FACTOR_VARIANCE_FLOOR: f64 = 1e-6;

/// Free loadings start here under [`StartPolicy::EngineDefault`].
pub const DEFAULT_LOADING_START: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Loading,
    FactorVariance,
    FactorCovariance,
    ResidualVariance,
    Intercept,
}

/// Where a parameter lives in the model matrices (indices into the
/// layout's factor and indicator lists).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Loading { factor: usize, indicator: usize },
    FactorVariance(usize),
    FactorCovariance(usize, usize),
    ResidualVariance(usize),
    Intercept(usize),
}

impl Param {
    pub fn role(&self) -> Role {
        match self {
            Param::Loading { .. } => Role::Loading,
            Param::FactorVariance(_) => Role::FactorVariance,
            Param::FactorCovariance(..) => Role::FactorCovariance,
            Param::ResidualVariance(_) => Role::ResidualVariance,
            Param::Intercept(_) => Role::Intercept,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayoutEntry {
    pub param: Param,
    pub label: String,
    pub start: f64,
    pub lower: f64,
    pub upper: f64,
    pub fixed: Option<f64>,
    /// Start came from an explicit `start` directive.
    pub user_start: bool,
}

impl LayoutEntry {
    pub fn role(&self) -> Role {
        self.param.role()
    }

    pub fn is_free(&self) -> bool {
        self.fixed.is_none()
    }
}

/// Flattened parameter space of a model under one identification strategy.
///
/// Entries are ordered loadings (factor-major, declaration order), factor
/// variances, factor covariances, residual variances, intercepts. Free
/// entries map one-to-one onto positions of a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub factors: Vec<String>,
    pub indicators: Vec<String>,
    pub entries: Vec<LayoutEntry>,
    free: Vec<usize>,
}

impl ParameterLayout {
    pub fn new(factors: Vec<String>, indicators: Vec<String>, entries: Vec<LayoutEntry>) -> Self {
        let free = entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_free())
            .map(|(i, _)| i)
            .collect();
        Self {
            factors,
            indicators,
            entries,
            free,
        }
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn n_indicators(&self) -> usize {
        self.indicators.len()
    }

    /// Entry index of each free position.
    pub fn free_entry_indices(&self) -> &[usize] {
        &self.free
    }

    pub fn free_entry(&self, position: usize) -> &LayoutEntry {
        &self.entries[self.free[position]]
    }

    pub fn free_entries(&self) -> impl Iterator<Item = &LayoutEntry> {
        self.free.iter().map(move |&i| &self.entries[i])
    }

    /// Position of a parameter in the free vector, if it is free.
    pub fn position_of(&self, param: Param) -> Option<usize> {
        self.free
            .iter()
            .position(|&i| self.entries[i].param == param)
    }

    pub fn entry_of(&self, param: Param) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.param == param)
    }

    pub fn starts(&self) -> ParameterVector {
        self.free_entries().map(|e| e.start).collect()
    }

    pub fn lower_bounds(&self) -> Vec<f64> {
        self.free_entries().map(|e| e.lower).collect()
    }

    pub fn upper_bounds(&self) -> Vec<f64> {
        self.free_entries().map(|e| e.upper).collect()
    }

    pub fn loading_param(&self, r: &LoadingRef) -> Option<Param> {
        let factor = self.factors.iter().position(|f| *f == r.factor)?;
        let indicator = self.indicators.iter().position(|x| *x == r.indicator)?;
        let p = Param::Loading { factor, indicator };
        self.entry_of(p).map(|_| p)
    }

    /// Value of every entry, fixed ones resolved.
    pub fn resolve(&self, theta: &[f64]) -> Vec<f64> {
        let mut pos = 0;
        self.entries
            .iter()
            .map(|e| match e.fixed {
                Some(v) => v,
                None => {
                    let v = theta[pos];
                    pos += 1;
                    v
                }
            })
            .collect()
    }
}

/// Moves a start value strictly inside `[lower, upper]`.
pub(crate) fn clip_start(start: f64, lower: f64, upper: f64) -> f64 {
    if start > lower && start < upper {
        return start;
    }
    let margin = if upper.is_finite() && lower.is_finite() {
        (0.25 * (upper - lower)).min(0.1)
    } else {
        0.1
    };
    if start <= lower {
        lower + margin
    } else {
        upper - margin
    }
}

/// Builds the free-parameter layout of `spec` under `strategy`.
pub fn build_parameter_layout(
    spec: &ModelSpec,
    strategy: &IdentificationStrategy,
    start_policy: &StartPolicy,
) -> Result<ParameterLayout> {
    if let Some(d) = spec.validate().first() {
        return Err(CfaError::InvalidModel(d.to_string()));
    }

    let mut anchors: Vec<Option<String>> = vec![None; spec.factors.len()];
    let fixed_variance = matches!(strategy, IdentificationStrategy::FixedFactorVariance);
    if let IdentificationStrategy::FixedAnchorLoading(refs) = strategy {
        for r in refs {
            let unknown = || CfaError::UnknownAnchor {
                factor: r.factor.clone(),
                indicator: r.indicator.clone(),
            };
            let fi = spec.factor_index(&r.factor).ok_or_else(unknown)?;
            let loading = spec.loading(r).ok_or_else(unknown)?;
            if anchors[fi].is_some() {
                return Err(CfaError::IdentificationConflict(r.factor.clone()));
            }
            if let ParamStatus::Fixed(v) = loading.status {
                if v != 1.0 {
                    return Err(CfaError::IdentificationConflict(r.factor.clone()));
                }
            }
            if let Some(b) = spec.loading_bounds.get(r) {
                if 1.0 < b.lower || 1.0 > b.upper {
                    return Err(CfaError::IdentificationConflict(r.factor.clone()));
                }
            }
            anchors[fi] = Some(r.indicator.clone());
        }
        for (fi, f) in spec.factors.iter().enumerate() {
            if anchors[fi].is_none() {
                return Err(CfaError::InvalidArgument(format!(
                    "no anchor loading given for factor `{}`",
                    f
                )));
            }
            if matches!(spec.factor_variances.get(f), Some(ParamStatus::Fixed(_))) {
                return Err(CfaError::IdentificationConflict(f.clone()));
            }
        }
    }
    if fixed_variance {
        for f in &spec.factors {
            if let Some(ParamStatus::Fixed(v)) = spec.factor_variances.get(f) {
                if *v != 1.0 {
                    return Err(CfaError::IdentificationConflict(f.clone()));
                }
            }
        }
    }

    let mut entries = Vec::new();
    for (fi, f) in spec.factors.iter().enumerate() {
        for l in spec.factor_loadings(f) {
            let r = l.reference();
            let xi = spec.indicator_index(&l.indicator).expect("validated");
            let bound = spec.loading_bounds.get(&r).copied().unwrap_or_default();
            let is_anchor = anchors[fi].as_deref() == Some(l.indicator.as_str());
            let fixed = if is_anchor {
                Some(1.0)
            } else {
                l.status.fixed_value()
            };
            let user_start = fixed.is_none() && spec.loading_starts.contains_key(&r);
            let start = match fixed {
                Some(v) => v,
                None => {
                    let raw = match (spec.loading_starts.get(&r), start_policy) {
                        (Some(v), _) => *v,
                        (None, StartPolicy::EngineDefault) => DEFAULT_LOADING_START,
                        (None, StartPolicy::UniformLoading(v)) => *v,
                        (None, StartPolicy::PerLoading(map)) => *map
                            .get(&r)
                            .ok_or_else(|| CfaError::MissingStart(r.to_string()))?,
                    };
                    clip_start(raw, bound.lower, bound.upper)
                }
            };
            entries.push(LayoutEntry {
                param: Param::Loading {
                    factor: fi,
                    indicator: xi,
                },
                label: r.to_string(),
                start,
                lower: bound.lower,
                upper: bound.upper,
                fixed,
                user_start,
            });
        }
    }
    for (fi, f) in spec.factors.iter().enumerate() {
        let fixed = if fixed_variance {
            Some(1.0)
        } else {
            spec.factor_variances.get(f).and_then(|s| s.fixed_value())
        };
        entries.push(LayoutEntry {
            param: Param::FactorVariance(fi),
            label: format!("var({})", f),
            start: fixed.unwrap_or(1.0),
            lower: FACTOR_VARIANCE_FLOOR,
            upper: f64::INFINITY,
            fixed,
            user_start: false,
        });
    }
    for i in 0..spec.factors.len() {
        for j in (i + 1)..spec.factors.len() {
            let key = (spec.factors[i].clone(), spec.factors[j].clone());
            let fixed = spec
                .factor_covariances
                .get(&key)
                .and_then(|s| s.fixed_value());
            entries.push(LayoutEntry {
                param: Param::FactorCovariance(i, j),
                label: format!("cov({},{})", key.0, key.1),
                start: fixed.unwrap_or(0.0),
                lower: f64::NEG_INFINITY,
                upper: f64::INFINITY,
                fixed,
                user_start: false,
            });
        }
    }
    for (xi, x) in spec.indicators.iter().enumerate() {
        let fixed = spec
            .residual_variances
            .get(&x.name)
            .and_then(|s| s.fixed_value());
        entries.push(LayoutEntry {
            param: Param::ResidualVariance(xi),
            label: format!("res({})", x.name),
            start: fixed.unwrap_or(0.5),
            lower: RESIDUAL_FLOOR,
            upper: f64::INFINITY,
            fixed,
            user_start: false,
        });
    }
    for (xi, x) in spec.indicators.iter().enumerate() {
        let fixed = spec.intercepts.get(&x.name).and_then(|s| s.fixed_value());
        entries.push(LayoutEntry {
            param: Param::Intercept(xi),
            label: format!("int({})", x.name),
            start: fixed.unwrap_or(0.0),
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            fixed,
            user_start: false,
        });
    }

    Ok(ParameterLayout::new(
        spec.factors.clone(),
        spec.indicators.iter().map(|x| x.name.clone()).collect(),
        entries,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::parse_model_text;
    use std::collections::BTreeMap;

    fn spec3() -> ModelSpec {
        parse_model_text("F =~ x1 + x2 + x3").unwrap()
    }

    fn count(layout: &ParameterLayout, role: Role) -> usize {
        layout.free_entries().filter(|e| e.role() == role).count()
    }

    #[test]
    fn fixed_variance_counts() {
        let layout = build_parameter_layout(
            &spec3(),
            &IdentificationStrategy::FixedFactorVariance,
            &StartPolicy::EngineDefault,
        )
        .unwrap();
        // Enumerated from the spec: three loadings, three residuals, three
        // intercepts are free; the variance is the only other entry.
        let expected_free: usize = spec3().loadings.len() + 2 * spec3().indicators.len();
        assert_eq!(layout.n_free(), expected_free);
        assert_eq!(count(&layout, Role::Loading), 3);
        assert_eq!(count(&layout, Role::ResidualVariance), 3);
        assert_eq!(count(&layout, Role::Intercept), 3);
        assert_eq!(count(&layout, Role::FactorVariance), 0);
        let var = layout.entry_of(Param::FactorVariance(0)).unwrap();
        assert_eq!(var.fixed, Some(1.0));
    }

    #[test]
    fn anchor_fixes_loading_and_frees_variance() {
        let layout = build_parameter_layout(
            &spec3(),
            &IdentificationStrategy::anchor("F", "x1"),
            &StartPolicy::EngineDefault,
        )
        .unwrap();
        let anchor = layout
            .entry_of(Param::Loading {
                factor: 0,
                indicator: 0,
            })
            .unwrap();
        assert_eq!(anchor.fixed, Some(1.0));
        assert!(layout.position_of(Param::FactorVariance(0)).is_some());
        let non_intercept = layout
            .free_entries()
            .filter(|e| e.role() != Role::Intercept)
            .count();
        assert_eq!(non_intercept, 6);
        assert_eq!(count(&layout, Role::Intercept), 3);
    }

    #[test]
    fn unknown_anchor() {
        let err = build_parameter_layout(
            &spec3(),
            &IdentificationStrategy::anchor("F", "x9"),
            &StartPolicy::EngineDefault,
        )
        .unwrap_err();
        assert_eq!(
            err,
            CfaError::UnknownAnchor {
                factor: "F".into(),
                indicator: "x9".into()
            }
        );
    }

    #[test]
    fn both_strategies_for_one_factor() {
        let spec = parse_model_text("F =~ x1 + x2 + x3\nfixvar F = 1").unwrap();
        let err = build_parameter_layout(
            &spec,
            &IdentificationStrategy::anchor("F", "x1"),
            &StartPolicy::EngineDefault,
        )
        .unwrap_err();
        assert_eq!(err, CfaError::IdentificationConflict("F".into()));
        let twice = IdentificationStrategy::FixedAnchorLoading(vec![
            LoadingRef::new("F", "x1"),
            LoadingRef::new("F", "x2"),
        ]);
        assert!(build_parameter_layout(&spec3(), &twice, &StartPolicy::EngineDefault).is_err());
    }

    #[test]
    fn spec_starts_override_policy_and_bounds_copy() {
        let spec =
            parse_model_text("F =~ x1 + x2 + x3\nstart F.x2 = -1\nbound F.x3 lower 0").unwrap();
        let layout = build_parameter_layout(
            &spec,
            &IdentificationStrategy::FixedFactorVariance,
            &StartPolicy::UniformLoading(-0.8),
        )
        .unwrap();
        let starts: Vec<f64> = layout
            .free_entries()
            .filter(|e| e.role() == Role::Loading)
            .map(|e| e.start)
            .collect();
        // x3 start -0.8 violates its lower bound and is moved inside.
        assert_eq!(starts, vec![-0.8, -1.0, 0.1]);
        let x3 = layout.free_entry(2);
        assert_eq!((x3.lower, x3.upper), (0.0, f64::INFINITY));
        let x1 = layout.free_entry(0);
        assert_eq!((x1.lower, x1.upper), (f64::NEG_INFINITY, f64::INFINITY));
    }

    #[test]
    fn per_loading_must_cover() {
        let mut map = BTreeMap::new();
        map.insert(LoadingRef::new("F", "x1"), 1.0);
        let err = build_parameter_layout(
            &spec3(),
            &IdentificationStrategy::FixedFactorVariance,
            &StartPolicy::PerLoading(map),
        )
        .unwrap_err();
        assert_eq!(err, CfaError::MissingStart("F.x2".into()));
    }

    #[test]
    fn deterministic_order() {
        let spec = parse_model_text("F =~ a + b\nG =~ c + d + b").unwrap();
        let build = || {
            build_parameter_layout(
                &spec,
                &IdentificationStrategy::FixedFactorVariance,
                &StartPolicy::EngineDefault,
            )
            .unwrap()
        };
        let (a, b) = (build(), build());
        assert_eq!(a, b);
        let labels: Vec<_> = a.entries.iter().map(|e| e.label.as_str()).collect();
        assert_eq!(
            labels,
            vec![
                "F.a", "F.b", "G.c", "G.d", "G.b", "var(F)", "var(G)", "cov(F,G)", "res(a)",
                "res(b)", "res(c)", "res(d)", "int(a)", "int(b)", "int(c)", "int(d)"
            ]
        );
    }

    #[test]
    fn starts_inside_bounds() {
        assert_eq!(clip_start(0.5, 0.0, f64::INFINITY), 0.5);
        assert_eq!(clip_start(0.5, f64::NEG_INFINITY, 0.0), -0.1);
        assert_eq!(clip_start(0.0, 0.0, 0.2), 0.05);
    }
}
