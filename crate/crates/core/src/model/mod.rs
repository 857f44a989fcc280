//! Declarative factor-model specifications.
//!
//! A [`ModelSpec`] records which indicators load on which factors together
//! with user directives (fixed values, start values, bounds). An
//! [`IdentificationStrategy`] then turns a spec into a [`ParameterLayout`],
//! the flat free-parameter space the estimators work in.

mod implied;
mod layout;
mod parse;

use std::collections::BTreeMap;
use std::fmt;

pub use implied::{implied_covariance, ModelMatrices};
pub use layout::{
    build_parameter_layout, LayoutEntry, Param, ParameterLayout, ParameterVector, Role,
    DEFAULT_LOADING_START, FACTOR_VARIANCE_FLOOR, RESIDUAL_FLOOR,
};
pub(crate) use layout::clip_start as layout_clip_start;
pub use parse::parse_model_text;

/// Measurement scale of an observed variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariableKind {
    Continuous,
    Ordinal { categories: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Indicator {
    pub name: String,
    pub kind: VariableKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamStatus {
    Free,
    Fixed(f64),
}

impl ParamStatus {
    pub fn fixed_value(&self) -> Option<f64> {
        match self {
            ParamStatus::Free => None,
            ParamStatus::Fixed(v) => Some(*v),
        }
    }
}

/// A `factor.indicator` pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LoadingRef {
    pub factor: String,
    pub indicator: String,
}

impl LoadingRef {
    pub fn new(factor: impl Into<String>, indicator: impl Into<String>) -> Self {
        Self {
            factor: factor.into(),
            indicator: indicator.into(),
        }
    }

    /// Parses `F.x`.
    pub fn parse(s: &str) -> Option<Self> {
        let (f, x) = s.trim().split_once('.')?;
        if f.is_empty() || x.is_empty() || !is_ident(f) || !is_ident(x) {
            return None;
        }
        Some(Self::new(f, x))
    }
}

impl fmt::Display for LoadingRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.factor, self.indicator)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub lower: f64,
    pub upper: f64,
}

impl Default for Bound {
    fn default() -> Self {
        Self {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loading {
    pub factor: String,
    pub indicator: String,
    pub status: ParamStatus,
}

impl Loading {
    pub fn reference(&self) -> LoadingRef {
        LoadingRef::new(&self.factor, &self.indicator)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSpec {
    pub factors: Vec<String>,
    pub indicators: Vec<Indicator>,
    /// Declared loadings in declaration order.
    pub loadings: Vec<Loading>,
    pub factor_variances: BTreeMap<String, ParamStatus>,
    /// Keyed by factor pairs in declaration order (`(first, second)`).
    pub factor_covariances: BTreeMap<(String, String), ParamStatus>,
    pub residual_variances: BTreeMap<String, ParamStatus>,
    pub intercepts: BTreeMap<String, ParamStatus>,
    pub loading_starts: BTreeMap<LoadingRef, f64>,
    pub loading_bounds: BTreeMap<LoadingRef, Bound>,
}

/// Which parameters give each factor its scale.
#[derive(Debug, Clone, PartialEq)]
pub enum IdentificationStrategy {
    /// Every factor variance fixed at 1 and factor means at 0.
    FixedFactorVariance,
    /// One loading per factor fixed at 1; factor variances free.
    FixedAnchorLoading(Vec<LoadingRef>),
}

impl IdentificationStrategy {
    pub fn anchor(factor: &str, indicator: &str) -> Self {
        IdentificationStrategy::FixedAnchorLoading(vec![LoadingRef::new(factor, indicator)])
    }
}

/// A violated model invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub invariant: &'static str,
    pub location: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.invariant, self.location)
    }
}

pub(crate) fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_alphanumeric() || c == '_')
}

impl ModelSpec {
    /// Single-factor spec with every loading free.
    pub fn one_factor(factor: &str, indicators: &[&str]) -> Self {
        let mut spec = ModelSpec {
            factors: vec![factor.to_string()],
            ..Default::default()
        };
        spec.factor_variances
            .insert(factor.to_string(), ParamStatus::Free);
        for x in indicators {
            spec.indicators.push(Indicator {
                name: x.to_string(),
                kind: VariableKind::Continuous,
            });
            spec.loadings.push(Loading {
                factor: factor.to_string(),
                indicator: x.to_string(),
                status: ParamStatus::Free,
            });
            spec.residual_variances
                .insert(x.to_string(), ParamStatus::Free);
            spec.intercepts.insert(x.to_string(), ParamStatus::Free);
        }
        spec
    }

    pub fn factor_index(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f == name)
    }

    pub fn indicator_index(&self, name: &str) -> Option<usize> {
        self.indicators.iter().position(|x| x.name == name)
    }

    pub fn loading(&self, r: &LoadingRef) -> Option<&Loading> {
        self.loadings
            .iter()
            .find(|l| l.factor == r.factor && l.indicator == r.indicator)
    }

    pub fn loading_mut(&mut self, r: &LoadingRef) -> Option<&mut Loading> {
        self.loadings
            .iter_mut()
            .find(|l| l.factor == r.factor && l.indicator == r.indicator)
    }

    /// Loadings of one factor, in declaration order.
    pub fn factor_loadings<'a>(&'a self, factor: &'a str) -> impl Iterator<Item = &'a Loading> {
        self.loadings.iter().filter(move |l| l.factor == factor)
    }

    pub fn all_ordinal(&self) -> bool {
        self.indicators
            .iter()
            .all(|x| matches!(x.kind, VariableKind::Ordinal { .. }))
    }

    /// Checks every structural invariant; an empty list means the spec is valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        validate_spec(self)
    }

    /// Serializes back to model text accepted by [`parse_model_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in &self.factors {
            let xs: Vec<&str> = self
                .factor_loadings(f)
                .map(|l| l.indicator.as_str())
                .collect();
            out.push_str(&format!("{} =~ {}\n", f, xs.join(" + ")));
        }
        for x in &self.indicators {
            if let VariableKind::Ordinal { categories } = x.kind {
                out.push_str(&format!("ordinal {} {}\n", x.name, categories));
            }
        }
        for l in &self.loadings {
            if let ParamStatus::Fixed(v) = l.status {
                out.push_str(&format!("fix {} = {}\n", l.reference(), fmt_num(v)));
            }
        }
        for (r, v) in &self.loading_starts {
            out.push_str(&format!("start {} = {}\n", r, fmt_num(*v)));
        }
        for (r, b) in &self.loading_bounds {
            if b.lower > f64::NEG_INFINITY {
                out.push_str(&format!("bound {} lower {}\n", r, fmt_num(b.lower)));
            }
            if b.upper < f64::INFINITY {
                out.push_str(&format!("bound {} upper {}\n", r, fmt_num(b.upper)));
            }
        }
        for (f, s) in &self.factor_variances {
            if let ParamStatus::Fixed(v) = s {
                out.push_str(&format!("fixvar {} = {}\n", f, fmt_num(*v)));
            }
        }
        for ((f, g), s) in &self.factor_covariances {
            if let ParamStatus::Fixed(v) = s {
                out.push_str(&format!("fixcov {} {} = {}\n", f, g, fmt_num(*v)));
            }
        }
        for (x, s) in &self.residual_variances {
            if let ParamStatus::Fixed(v) = s {
                out.push_str(&format!("fixres {} = {}\n", x, fmt_num(*v)));
            }
        }
        for (x, s) in &self.intercepts {
            if let ParamStatus::Fixed(v) = s {
                out.push_str(&format!("fixint {} = {}\n", x, fmt_num(*v)));
            }
        }
        out
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

fn fmt_num(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{}", v)
    }
}

/// Lists every violated [`ModelSpec`] invariant.
pub fn validate_spec(spec: &ModelSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |invariant: &'static str, location: String| {
        out.push(Diagnostic {
            invariant,
            location,
        })
    };

    if spec.factors.is_empty() {
        push("model declares no factors", "model".into());
    }
    for (i, f) in spec.factors.iter().enumerate() {
        if spec.factors[..i].contains(f) {
            push("duplicate factor", f.clone());
        }
    }
    for (i, x) in spec.indicators.iter().enumerate() {
        if spec.indicators[..i].iter().any(|y| y.name == x.name) {
            push("duplicate indicator", x.name.clone());
        }
        if spec.factors.contains(&x.name) {
            push("name used as both factor and indicator", x.name.clone());
        }
    }
    for (i, l) in spec.loadings.iter().enumerate() {
        if spec.factor_index(&l.factor).is_none() {
            push("loading references unknown factor", l.reference().to_string());
        }
        if spec.indicator_index(&l.indicator).is_none() {
            push(
                "loading references unknown indicator",
                l.reference().to_string(),
            );
        }
        if spec.loadings[..i]
            .iter()
            .any(|m| m.factor == l.factor && m.indicator == l.indicator)
        {
            push("duplicate loading", l.reference().to_string());
        }
    }
    for f in &spec.factors {
        if spec.factor_loadings(f).next().is_none() {
            push("factor has no indicators", f.clone());
        }
    }
    for x in &spec.indicators {
        if !spec.loadings.iter().any(|l| l.indicator == x.name) {
            push("indicator loads on no factor", x.name.clone());
        }
        if let VariableKind::Ordinal { categories } = x.kind {
            if categories < 2 {
                push("ordinal category count below 2", x.name.clone());
            }
        }
    }
    for r in spec.loading_starts.keys() {
        match spec.loading(r) {
            None => push("start on undeclared loading", r.to_string()),
            Some(l) if matches!(l.status, ParamStatus::Fixed(_)) => {
                push("fixed parameter has start value", r.to_string())
            }
            _ => {}
        }
    }
    for (r, b) in &spec.loading_bounds {
        if spec.loading(r).is_none() {
            push("bound on undeclared loading", r.to_string());
        }
        if !(b.lower <= b.upper) {
            push("bound lower exceeds upper", r.to_string());
        }
        if let Some(ParamStatus::Fixed(v)) = spec.loading(r).map(|l| l.status) {
            if v < b.lower || v > b.upper {
                push("fixed value outside its bound", r.to_string());
            }
        }
    }
    for f in spec.factor_variances.keys() {
        if spec.factor_index(f).is_none() {
            push("variance on unknown factor", f.clone());
        }
    }
    for (f, g) in spec.factor_covariances.keys() {
        if spec.factor_index(f).is_none() || spec.factor_index(g).is_none() || f == g {
            push("invalid factor covariance pair", format!("{} {}", f, g));
        }
    }
    for x in spec
        .residual_variances
        .keys()
        .chain(spec.intercepts.keys())
    {
        if spec.indicator_index(x).is_none() {
            push("directive on unknown indicator", x.clone());
        }
    }
    out
}
