//! Monte Carlo replication of one-factor sign experiments.
//!
//! Each replicate draws one dataset from the population model and fits
//! every run to that same dataset, so contrasts between runs are paired.
//! Replicate `r` uses seed `base_seed ^ r`; results are collected by
//! replicate index, so output does not depend on the number of workers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;

use crate::categorical::{fit_dwls, polychoric_matrix};
use crate::datagen::{discretize_to_ordinal, generate_continuous, replicate_seed, ThresholdSet};
use crate::error::{CfaError, Result};
use crate::ml::{fit_ml, FitOptions, FitResult, SampleMoments, StartPolicy};
use crate::model::{
    build_parameter_layout, implied_covariance, Bound, IdentificationStrategy, LoadingRef, ModelSpec,
    Param, ParameterLayout, VariableKind,
};
use crate::sign::{classify_flip, dcr, positive_anchor, DcrRecord, FlipClass};

pub const FACTOR: &str = "F";
pub const LOADING_MAGNITUDE: f64 = 0.7;

/// True loadings of design condition `id`.
pub fn make_condition(id: u8) -> Result<Vec<f64>> {
    let m = LOADING_MAGNITUDE;
    Ok(match id {
        1 => vec![m, m, m],
        2 => vec![-m, -m, -m],
        3 => vec![-m, m, m],
        4 => vec![-m, -m, m],
        _ => {
            return Err(CfaError::InvalidArgument(format!(
                "condition must be 1..4, got {}",
                id
            )))
        }
    })
}

pub fn indicator_names(p: usize) -> Vec<String> {
    (1..=p).map(|i| format!("x{}", i)).collect()
}

/// One-factor analysis model over `x1..xp`.
pub fn one_factor_spec(p: usize) -> ModelSpec {
    let names = indicator_names(p);
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    ModelSpec::one_factor(FACTOR, &refs)
}

/// Layout and parameter vector of the population: unit factor variance,
/// residuals `1 − λ²`, zero intercepts.
pub fn population(truth: &[f64]) -> Result<(ParameterLayout, Vec<f64>)> {
    if truth.iter().any(|l| l.abs() >= 1.0 || !l.is_finite()) {
        return Err(CfaError::InvalidArgument("population loadings must lie in (-1, 1)".into()));
    }
    let layout = build_parameter_layout(
        &one_factor_spec(truth.len()),
        &IdentificationStrategy::FixedFactorVariance,
        &StartPolicy::EngineDefault,
    )?;
    let theta = layout
        .free_entries()
        .map(|e| match e.param {
            Param::Loading { indicator, .. } => truth[indicator],
            Param::ResidualVariance(x) => 1.0 - truth[x] * truth[x],
            _ => 0.0,
        })
        .collect();
    Ok((layout, theta))
}

/// An identification and start/bound choice fitted to every replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub strategy: IdentificationStrategy,
    pub start_policy: StartPolicy,
    pub bounds: BTreeMap<LoadingRef, Bound>,
}

impl RunSpec {
    pub fn new(label: &str, strategy: IdentificationStrategy, start_policy: StartPolicy) -> Self {
        Self {
            label: label.to_string(),
            strategy,
            start_policy,
            bounds: BTreeMap::new(),
        }
    }

    /// Parses a run token against the true loadings of a one-factor design.
    ///
    /// ```text
    /// m1            fixed variance, engine-default starts
    /// m2[:v]        fixed variance, every loading starts at v (default +1)
    /// m3[:v]        fixed variance, every loading starts at v (default -1)
    /// m4            first loading fixed at 1
    /// sol1[:F.x]    positive anchor fixed at 1 (default: last positive item)
    /// sol2[:lb0|ub0] fixed variance, all loadings bounded below/above by 0
    ///               (default: each loading bounded by the sign of its truth)
    /// sol3[:s]      fixed variance, starts s·sign(λ) (default s = 1)
    /// ```
    pub fn parse(token: &str, truth: &[f64]) -> Result<Self> {
        let bad = |msg: &str| CfaError::InvalidArgument(format!("run `{}`: {}", token, msg));
        let (kind, arg) = match token.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (token, None),
        };
        let names = indicator_names(truth.len());
        let refs: Vec<LoadingRef> = names.iter().map(|x| LoadingRef::new(FACTOR, x)).collect();
        let number = |a: Option<&str>, default: f64| -> Result<f64> {
            match a {
                None => Ok(default),
                Some(s) => s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad("expected a number")),
            }
        };
        let fixvar = IdentificationStrategy::FixedFactorVariance;
        let run = match kind {
            "m1" if arg.is_none() => RunSpec::new(token, fixvar, StartPolicy::EngineDefault),
            "m2" => RunSpec::new(token, fixvar, StartPolicy::UniformLoading(number(arg, 1.0)?)),
            "m3" => RunSpec::new(token, fixvar, StartPolicy::UniformLoading(number(arg, -1.0)?)),
            "m4" if arg.is_none() => RunSpec::new(
                token,
                IdentificationStrategy::FixedAnchorLoading(vec![refs[0].clone()]),
                StartPolicy::EngineDefault,
            ),
            "sol1" => {
                let anchor = match arg {
                    Some(a) => LoadingRef::parse(a).ok_or_else(|| bad("expected F.x"))?,
                    None => {
                        let k = truth
                            .iter()
                            .rposition(|l| *l > 0.0)
                            .ok_or_else(|| bad("no positive loading to anchor"))?;
                        refs[k].clone()
                    }
                };
                if !refs.contains(&anchor) {
                    return Err(CfaError::UnknownAnchor {
                        factor: anchor.factor,
                        indicator: anchor.indicator,
                    });
                }
                RunSpec::new(
                    token,
                    IdentificationStrategy::FixedAnchorLoading(vec![anchor]),
                    StartPolicy::EngineDefault,
                )
            }
            "sol2" => {
                let lower = Bound {
                    lower: 0.0,
                    upper: f64::INFINITY,
                };
                let upper = Bound {
                    lower: f64::NEG_INFINITY,
                    upper: 0.0,
                };
                let mut run = RunSpec::new(token, fixvar, StartPolicy::EngineDefault);
                for (r, t) in refs.iter().zip(truth) {
                    let b = match arg {
                        Some("lb0") => lower,
                        Some("ub0") => upper,
                        None if *t > 0.0 => lower,
                        None => upper,
                        Some(_) => return Err(bad("expected lb0 or ub0")),
                    };
                    run.bounds.insert(r.clone(), b);
                }
                run
            }
            "sol3" => {
                let s = number(arg.map(|a| a.trim_start_matches('±')), 1.0)?;
                let starts = refs
                    .iter()
                    .zip(truth)
                    .map(|(r, t)| (r.clone(), s * t.signum()))
                    .collect();
                RunSpec::new(token, fixvar, StartPolicy::PerLoading(starts))
            }
            _ => return Err(bad("unknown run kind")),
        };
        Ok(run)
    }

    /// Analysis spec with this run's bounds applied.
    pub fn analysis_spec(&self, base: &ModelSpec) -> Result<(ModelSpec, IdentificationStrategy)> {
        let mut spec = base.clone();
        for (r, b) in &self.bounds {
            if spec.loading(r).is_none() {
                return Err(CfaError::InvalidArgument(format!("bound on unknown loading {}", r)));
            }
            spec.loading_bounds.insert(r.clone(), *b);
        }
        match &self.strategy {
            IdentificationStrategy::FixedAnchorLoading(anchors) if anchors.len() == 1 => {
                positive_anchor(&spec, &anchors[0])
            }
            s => Ok((spec, s.clone())),
        }
    }
}

/// Kind of data each replicate produces.
#[derive(Debug, Clone, PartialEq)]
pub enum DataKind {
    Continuous,
    /// Same cut points for every indicator; fitted by DWLS.
    Ordinal { thresholds: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    /// Design condition id, when the truth came from [`make_condition`].
    pub condition: Option<u8>,
    pub truth: Vec<f64>,
    pub n: usize,
    pub replicates: usize,
    pub base_seed: u64,
    pub runs: Vec<RunSpec>,
    pub data_kind: DataKind,
    /// Fit the population covariance itself instead of sampled data.
    pub exact_fit: bool,
    /// Worker threads; `None` uses all available.
    pub workers: Option<usize>,
}

impl SimulationConfig {
    pub fn for_condition(id: u8, runs: Vec<RunSpec>) -> Result<Self> {
        Ok(Self {
            condition: Some(id),
            truth: make_condition(id)?,
            n: 200,
            replicates: 500,
            base_seed: 0,
            runs,
            data_kind: DataKind::Continuous,
            exact_fit: false,
            workers: None,
        })
    }

    pub fn condition_label(&self) -> String {
        self.condition.map_or_else(|| "custom".to_string(), |c| c.to_string())
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CfaError::Simulation(m));
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.runs.is_empty() {
            return bad("no runs given".into());
        }
        if self.truth.len() < 3 {
            return bad("need at least 3 indicators".into());
        }
        if self.truth.iter().any(|t| *t == 0.0) {
            return bad("true loadings must be non-zero".into());
        }
        if !self.exact_fit && self.n < 2 {
            return bad("sample size must be at least 2".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.runs {
            if !seen.insert(&r.label) {
                return bad(format!("duplicate run label `{}`", r.label));
            }
        }
        if let DataKind::Ordinal { thresholds } = &self.data_kind {
            ThresholdSet::uniform(1, thresholds)?;
            if thresholds.is_empty() {
                return bad("ordinal data need at least one threshold".into());
            }
        }
        Ok(())
    }
}

/// One run on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub converged: bool,
    /// Every loading in indicator order, fixed ones included.
    pub loadings: Vec<f64>,
    pub residuals: Vec<f64>,
    pub discrepancy: f64,
    /// Over the free loadings; `None` when the fit did not converge.
    pub flip: Option<FlipClass>,
    /// Free loadings outside their bounds.
    pub bound_violations: usize,
    /// Set when the fit could not be attempted.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    /// Indicator positions of the free loadings, in order.
    pub free_loadings: Vec<usize>,
    /// One record per free loading, over converged replicates.
    pub records: Vec<DcrRecord>,
    pub converged: usize,
    pub not_converged: usize,
    pub failed: usize,
    pub flips: BTreeMap<FlipClass, usize>,
    pub bound_violations: usize,
    pub outcomes: Vec<ReplicateOutcome>,
}

impl RunSummary {
    pub fn flip_count(&self, class: FlipClass) -> usize {
        self.flips.get(&class).copied().unwrap_or(0)
    }

    /// Converged outcomes only.
    pub fn converged_outcomes(&self) -> impl Iterator<Item = &ReplicateOutcome> {
        self.outcomes.iter().filter(|o| o.converged)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcrTable {
    pub condition: String,
    pub truth: Vec<f64>,
    pub n: usize,
    pub replicates: usize,
    pub base_seed: u64,
    pub exact_fit: bool,
    pub data_kind: DataKind,
    pub runs: Vec<RunSummary>,
}

impl DcrTable {
    pub fn run(&self, label: &str) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.label == label)
    }
}

struct PreparedRun {
    spec: ModelSpec,
    strategy: IdentificationStrategy,
    options: FitOptions,
    free: Vec<usize>,
}

fn prepare(config: &SimulationConfig) -> Result<Vec<PreparedRun>> {
    let mut base = one_factor_spec(config.truth.len());
    if let DataKind::Ordinal { thresholds } = &config.data_kind {
        for x in base.indicators.iter_mut() {
            x.kind = VariableKind::Ordinal {
                categories: thresholds.len() + 1,
            };
        }
    }
    config
        .runs
        .iter()
        .map(|run| {
            let (spec, strategy) = run.analysis_spec(&base)?;
            let layout = build_parameter_layout(&spec, &strategy, &run.start_policy)?;
            let free = layout
                .free_entries()
                .filter_map(|e| match e.param {
                    Param::Loading { indicator, .. } => Some(indicator),
                    _ => None,
                })
                .collect();
            Ok(PreparedRun {
                spec,
                strategy,
                options: FitOptions::with_starts(run.start_policy.clone()),
                free,
            })
        })
        .collect()
}

fn outcome(
    replicate: usize,
    fit: Result<FitResult>,
    run: &PreparedRun,
    truth: &[f64],
) -> ReplicateOutcome {
    let fit = match fit {
        Ok(f) => f,
        Err(e) => {
            return ReplicateOutcome {
                replicate,
                converged: false,
                loadings: Vec::new(),
                residuals: Vec::new(),
                discrepancy: f64::NAN,
                flip: None,
                bound_violations: 0,
                error: Some(e.to_string()),
            }
        }
    };
    let loadings: Vec<f64> = fit.matrices.loadings.column(0).iter().copied().collect();
    let free_est: Vec<f64> = run.free.iter().map(|&i| loadings[i]).collect();
    let free_truth: Vec<f64> = run.free.iter().map(|&i| truth[i]).collect();
    let bound_violations = fit
        .layout
        .free_entries()
        .zip(&fit.theta)
        .filter(|(e, v)| matches!(e.param, Param::Loading { .. }) && (**v < e.lower || **v > e.upper))
        .count();
    ReplicateOutcome {
        replicate,
        converged: fit.converged,
        flip: if fit.converged {
            classify_flip(&free_est, &free_truth).ok()
        } else {
            None
        },
        residuals: fit.matrices.residuals.iter().copied().collect(),
        discrepancy: fit.discrepancy,
        loadings,
        bound_violations,
        error: None,
    }
}

fn run_replicate(
    config: &SimulationConfig,
    prepared: &[PreparedRun],
    population: &(ParameterLayout, Vec<f64>),
    r: usize,
) -> Vec<ReplicateOutcome> {
    let fail = |e: CfaError| {
        prepared
            .iter()
            .map(|run| outcome(r, Err(e.clone()), run, &config.truth))
            .collect()
    };
    let (layout, theta) = population;
    if config.exact_fit {
        let sigma = match implied_covariance(layout, theta) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        return match &config.data_kind {
            DataKind::Continuous => {
                let moments = SampleMoments::from_covariance(sigma, config.n.max(2));
                prepared
                    .iter()
                    .map(|run| {
                        let fit = fit_ml(&run.spec, &run.strategy, &moments, &run.options);
                        outcome(r, fit, run, &config.truth)
                    })
                    .collect()
            }
            DataKind::Ordinal { thresholds } => {
                let p = config.truth.len();
                let summary = ThresholdSet::uniform(p, thresholds).and_then(|t| {
                    crate::categorical::PolychoricSummary::new(indicator_names(p), t, sigma)
                });
                match summary {
                    Ok(s) => prepared
                        .iter()
                        .map(|run| {
                            let fit = fit_dwls(&run.spec, &s, &run.options, &run.strategy);
                            outcome(r, fit, run, &config.truth)
                        })
                        .collect(),
                    Err(e) => fail(e),
                }
            }
        };
    }

    let seed = replicate_seed(config.base_seed, r as u64);
    let data = match generate_continuous(layout, theta, config.n, seed) {
        Ok(d) => d,
        Err(e) => return fail(e),
    };
    match &config.data_kind {
        DataKind::Continuous => {
            let moments = match SampleMoments::from_dataset(&data) {
                Ok(m) => m,
                Err(e) => return fail(e),
            };
            prepared
                .iter()
                .map(|run| {
                    let fit = fit_ml(&run.spec, &run.strategy, &moments, &run.options);
                    outcome(r, fit, run, &config.truth)
                })
                .collect()
        }
        DataKind::Ordinal { thresholds } => {
            let summary = ThresholdSet::uniform(data.p(), thresholds)
                .and_then(|t| discretize_to_ordinal(&data, &t))
                .and_then(|o| polychoric_matrix(&o));
            match summary {
                Ok(s) => prepared
                    .iter()
                    .map(|run| {
                        let fit = fit_dwls(&run.spec, &s, &run.options, &run.strategy);
                        outcome(r, fit, run, &config.truth)
                    })
                    .collect(),
                Err(e) => fail(e),
            }
        }
    }
}

/// Runs every replicate and aggregates DCR and flip classes per run.
pub fn run_simulation(config: &SimulationConfig) -> Result<DcrTable> {
    config.validate()?;
    let prepared = prepare(config)?;
    let pop = population(&config.truth)?;

    let work = || -> Vec<Vec<ReplicateOutcome>> {
        (0..config.replicates)
            .into_par_iter()
            .map(|r| run_replicate(config, &prepared, &pop, r))
            .collect()
    };
    let per_replicate = match config.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| CfaError::Simulation(e.to_string()))?
            .install(work),
        None => work(),
    };

    let mut runs = Vec::with_capacity(prepared.len());
    for (k, (run, spec)) in prepared.iter().zip(&config.runs).enumerate() {
        let outcomes: Vec<ReplicateOutcome> =
            per_replicate.iter().map(|row| row[k].clone()).collect();
        let converged: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.converged).collect();
        let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
        if converged.is_empty() {
            let why = outcomes
                .iter()
                .find_map(|o| o.error.clone())
                .unwrap_or_else(|| "no fit converged".into());
            return Err(CfaError::Simulation(format!(
                "run `{}`: every replicate failed ({})",
                spec.label, why
            )));
        }
        let free_truth: Vec<f64> = run.free.iter().map(|&i| config.truth[i]).collect();
        let estimates: Vec<Vec<f64>> = converged
            .iter()
            .map(|o| run.free.iter().map(|&i| o.loadings[i]).collect())
            .collect();
        let mut records = dcr(&estimates, &free_truth)?;
        for (rec, &i) in records.iter_mut().zip(&run.free) {
            rec.index = i;
        }
        let mut flips = BTreeMap::new();
        for o in &converged {
            if let Some(f) = o.flip {
                *flips.entry(f).or_insert(0) += 1;
            }
        }
        runs.push(RunSummary {
            label: spec.label.clone(),
            free_loadings: run.free.clone(),
            records,
            converged: converged.len(),
            not_converged: outcomes.len() - converged.len() - failed,
            failed,
            flips,
            bound_violations: outcomes.iter().map(|o| o.bound_violations).sum(),
            outcomes,
        });
    }

    Ok(DcrTable {
        condition: config.condition_label(),
        truth: config.truth.clone(),
        n: config.n,
        replicates: config.replicates,
        base_seed: config.base_seed,
        exact_fit: config.exact_fit,
        data_kind: config.data_kind.clone(),
        runs,
    })
}

struct Counting<W> {
    inner: W,
    bytes: usize,
}

impl<W: Write> Write for Counting<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let k = self.inner.write(buf)?;
        self.bytes += k;
        Ok(k)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Writes `condition,method,loading,truth,m,n,dcr` rows ordered by run,
/// then loading (1-based indicator position). Returns the byte count.
pub fn emit_dcr_table<W: Write>(table: &DcrTable, out: W) -> Result<usize> {
    if table.runs.is_empty() {
        return Err(CfaError::Simulation("table has no runs".into()));
    }
    let mut w = csv::Writer::from_writer(Counting { inner: out, bytes: 0 });
    w.write_record(["condition", "method", "loading", "truth", "m", "n", "dcr"])?;
    for run in &table.runs {
        for rec in &run.records {
            w.write_record([
                table.condition.clone(),
                run.label.clone(),
                (rec.index + 1).to_string(),
                rec.truth.to_string(),
                rec.m.to_string(),
                rec.n.to_string(),
                format!("{:.1}", rec.dcr),
            ])?;
        }
    }
    w.flush()?;
    let inner = w
        .into_inner()
        .map_err(|e| CfaError::Io(e.to_string()))?;
    Ok(inner.bytes)
}

/// Plain-text description of a run: configuration, seed, version,
/// convergence and flip-class counts.
pub fn run_manifest(table: &DcrTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "engine: cfa {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "condition: {}", table.condition);
    let truth: Vec<String> = table.truth.iter().map(|t| t.to_string()).collect();
    let _ = writeln!(s, "truth: {}", truth.join(" "));
    let _ = writeln!(s, "n: {}", table.n);
    let _ = writeln!(s, "replicates: {}", table.replicates);
    let _ = writeln!(s, "base_seed: {}", table.base_seed);
    let _ = writeln!(s, "exact_fit: {}", table.exact_fit);
    match &table.data_kind {
        DataKind::Continuous => {
            let _ = writeln!(s, "data: continuous (ml)");
        }
        DataKind::Ordinal { thresholds } => {
            let t: Vec<String> = thresholds.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "data: ordinal thresholds {} (dwls)", t.join(" "));
        }
    }
    for run in &table.runs {
        let _ = writeln!(
            s,
            "run {}: converged {}, not converged {}, failed {}, match {}, global_flip {}, mixed {}, bound violations {}",
            run.label,
            run.converged,
            run.not_converged,
            run.failed,
            run.flip_count(FlipClass::Match),
            run.flip_count(FlipClass::GlobalFlip),
            run.flip_count(FlipClass::Mixed),
            run.bound_violations
        );
    }
    s
}
