//! Command-line front end: `gen`, `fit` and `simulate`.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime or estimation
//! failures (including a fit that did not converge).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::categorical::{fit_dwls, polychoric_matrix};
use crate::datagen::{discretize_to_ordinal, sample_mvn, Dataset, ThresholdSet};
use crate::error::{CfaError, Result};
use crate::ml::{fit_ml_dataset, FitOptions, FitResult, StartPolicy};
use crate::model::{
    parse_model_text, Bound, IdentificationStrategy, LoadingRef, ModelMatrices, ModelSpec,
    ParamStatus, VariableKind,
};
use crate::simulation::{emit_dcr_table, make_condition, run_manifest, run_simulation, DataKind, RunSpec, SimulationConfig};

#[derive(Debug, Parser)]
#[command(name = "cfa", version, about = "Confirmatory factor analysis and sign-consistency simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a dataset from the population implied by a model file.
    Gen(GenArgs),
    /// Fit a model to a dataset and print the loadings.
    Fit(FitArgs),
    /// Run a Monte Carlo sign-consistency study and write a DCR table.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Model file; fixed and start values give the population, other
    /// loadings are 0.7 and residuals fill each variance up to 1.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cut every indicator into equally likely categories.
    #[arg(long)]
    ordinal: bool,
    /// Categories for indicators without an `ordinal` directive.
    #[arg(long, default_value_t = 2)]
    categories: usize,
    /// Output file (standard output when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `fixvar` or `anchor=F.x[,G.y...]`.
    #[arg(long, default_value = "fixvar")]
    identify: String,
    /// Start value for every free loading.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "per_start")]
    starts: Option<f64>,
    /// Start value for one loading, `F.x=v`; repeatable.
    #[arg(long = "per-start", allow_hyphen_values = true)]
    per_start: Vec<String>,
    /// Bounds for one loading, `F.x:lo:hi` (`inf`/`-inf` allowed); repeatable.
    #[arg(long, allow_hyphen_values = true)]
    bound: Vec<String>,
    /// Treat indicators as ordinal: polychoric correlations and DWLS.
    #[arg(long)]
    categorical: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Design condition 1..4.
    #[arg(long)]
    condition: u8,
    /// Comma-separated run tokens: m1, m2[:v], m3[:v], m4, sol1[:F.x],
    /// sol2[:lb0|ub0], sol3[:s].
    #[arg(long, allow_hyphen_values = true)]
    runs: String,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; a `.manifest.txt` file is written beside it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all available).
    #[arg(long)]
    workers: Option<usize>,
    /// Fit the population covariance instead of sampled data.
    #[arg(long)]
    exact_fit: bool,
    /// Comma-separated thresholds; makes the data ordinal (fitted by DWLS).
    #[arg(long, allow_hyphen_values = true)]
    thresholds: Option<String>,
}

/// Runs the command line `argv` (program name first).
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", text);
                    0
                }
                _ => {
                    let _ = write!(err, "{}", text);
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => gen(&a, out),
        Command::Fit(a) => fit(&a, out, err),
        Command::Simulate(a) => simulate(&a, out, err),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e);
            2
        }
    }
}

fn read_model(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CfaError::Io(format!("{}: {}", path.display(), e)))?;
    parse_model_text(&text)
}

fn open_data(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| CfaError::Io(format!("{}: {}", path.display(), e)))?;
    Dataset::read_csv(file)
}

/// Population matrices from a model's fixed and start values.
pub fn population_matrices(spec: &ModelSpec) -> Result<ModelMatrices> {
    let p = spec.indicators.len();
    let m = spec.factors.len();
    let mut loadings = nalgebra::DMatrix::zeros(p, m);
    for l in &spec.loadings {
        let r = l.reference();
        let value = match l.status {
            ParamStatus::Fixed(v) => v,
            ParamStatus::Free => spec.loading_starts.get(&r).copied().unwrap_or(0.7),
        };
        let f = spec.factor_index(&l.factor).expect("validated");
        let x = spec.indicator_index(&l.indicator).expect("validated");
        loadings[(x, f)] = value;
    }
    let mut factor_cov = nalgebra::DMatrix::identity(m, m);
    for (k, f) in spec.factors.iter().enumerate() {
        if let Some(ParamStatus::Fixed(v)) = spec.factor_variances.get(f) {
            factor_cov[(k, k)] = *v;
        }
    }
    for ((a, b), s) in &spec.factor_covariances {
        if let ParamStatus::Fixed(v) = s {
            let (i, j) = (spec.factor_index(a).expect("validated"), spec.factor_index(b).expect("validated"));
            factor_cov[(i, j)] = *v;
            factor_cov[(j, i)] = *v;
        }
    }
    let common = &loadings * &factor_cov * loadings.transpose();
    let mut residuals = DVector::zeros(p);
    let mut intercepts = DVector::zeros(p);
    for (i, x) in spec.indicators.iter().enumerate() {
        residuals[i] = match spec.residual_variances.get(&x.name) {
            Some(ParamStatus::Fixed(v)) => *v,
            _ => 1.0 - common[(i, i)],
        };
        if !(residuals[i] > 0.0) {
            return Err(CfaError::NegativeResidual(x.name.clone()));
        }
        if let Some(ParamStatus::Fixed(v)) = spec.intercepts.get(&x.name) {
            intercepts[i] = *v;
        }
    }
    Ok(ModelMatrices {
        loadings,
        factor_cov,
        residuals,
        intercepts,
    })
}

fn gen(a: &GenArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = read_model(&a.model)?;
    if a.n == 0 {
        return Err(CfaError::InvalidArgument("--n must be at least 1".into()));
    }
    let mats = population_matrices(&spec)?;
    let sigma = mats.covariance();
    let names: Vec<String> = spec.indicators.iter().map(|x| x.name.clone()).collect();
    let mut data = sample_mvn(&mats.intercepts, &sigma, &names, a.n, a.seed)?;
    if a.ordinal {
        let cuts = spec
            .indicators
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let c = match x.kind {
                    VariableKind::Ordinal { categories } => categories,
                    VariableKind::Continuous => a.categories,
                };
                let t = ThresholdSet::equal_probability(&[sigma[(i, i)].sqrt()], c)?;
                Ok(t.thresholds[0].iter().map(|v| v + mats.intercepts[i]).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        data = discretize_to_ordinal(&data, &ThresholdSet::new(cuts)?)?;
    }
    match &a.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| CfaError::Io(format!("{}: {}", path.display(), e)))?;
            data.write_csv(BufWriter::new(file))?;
        }
        None => data.write_csv(&mut *out)?,
    }
    Ok(0)
}

fn parse_identify(s: &str) -> Result<IdentificationStrategy> {
    if s == "fixvar" {
        return Ok(IdentificationStrategy::FixedFactorVariance);
    }
    let refs = s
        .strip_prefix("anchor=")
        .ok_or_else(|| CfaError::InvalidArgument(format!("--identify: expected fixvar or anchor=F.x, got `{}`", s)))?;
    let anchors = refs
        .split(',')
        .map(|r| LoadingRef::parse(r).ok_or_else(|| CfaError::InvalidArgument(format!("--identify: bad anchor `{}`", r))))
        .collect::<Result<Vec<_>>>()?;
    Ok(IdentificationStrategy::FixedAnchorLoading(anchors))
}

fn apply_fit_flags(spec: &mut ModelSpec, a: &FitArgs) -> Result<()> {
    for item in &a.per_start {
        let (r, v) = item
            .split_once('=')
            .ok_or_else(|| CfaError::InvalidArgument(format!("--per-start: expected F.x=v, got `{}`", item)))?;
        let r = LoadingRef::parse(r).ok_or_else(|| CfaError::InvalidArgument(format!("--per-start: bad loading `{}`", r)))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| CfaError::InvalidArgument(format!("--per-start: bad value `{}`", v)))?;
        if spec.loading(&r).is_none() {
            return Err(CfaError::InvalidArgument(format!("--per-start: unknown loading {}", r)));
        }
        spec.loading_starts.insert(r, v);
    }
    for item in &a.bound {
        let parts: Vec<&str> = item.split(':').collect();
        if parts.len() != 3 {
            return Err(CfaError::InvalidArgument(format!("--bound: expected F.x:lo:hi, got `{}`", item)));
        }
        let r = LoadingRef::parse(parts[0])
            .ok_or_else(|| CfaError::InvalidArgument(format!("--bound: bad loading `{}`", parts[0])))?;
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| !v.is_nan())
                .ok_or_else(|| CfaError::InvalidArgument(format!("--bound: bad number `{}`", s)))
        };
        let (lower, upper) = (num(parts[1])?, num(parts[2])?);
        if lower > upper {
            return Err(CfaError::InvalidArgument(format!("--bound: {} > {}", lower, upper)));
        }
        if spec.loading(&r).is_none() {
            return Err(CfaError::InvalidArgument(format!("--bound: unknown loading {}", r)));
        }
        spec.loading_bounds.insert(r, Bound { lower, upper });
    }
    Ok(())
}

/// Fits the model described by `fit` flags; shared by the CLI and tests.
fn fit_from_args(a: &FitArgs) -> Result<FitResult> {
    let mut spec = read_model(&a.model)?;
    apply_fit_flags(&mut spec, a)?;
    let strategy = parse_identify(&a.identify)?;
    let options = FitOptions::with_starts(match a.starts {
        Some(v) => StartPolicy::UniformLoading(v),
        None => StartPolicy::EngineDefault,
    });
    let data = open_data(&a.data)?;
    if !a.categorical {
        return fit_ml_dataset(&spec, &strategy, &data, &options);
    }
    let names: Vec<&str> = spec.indicators.iter().map(|x| x.name.as_str()).collect();
    let declared: Vec<Option<usize>> = spec
        .indicators
        .iter()
        .map(|x| match x.kind {
            VariableKind::Ordinal { categories } => Some(categories),
            VariableKind::Continuous => None,
        })
        .collect();
    let data = data.select(&names)?.into_ordinal(&declared)?;
    for (j, x) in spec.indicators.iter_mut().enumerate() {
        x.kind = data.kinds[j];
    }
    let summary = polychoric_matrix(&data)?;
    fit_dwls(&spec, &summary, &options, &strategy)
}

fn loading_table(fit: &FitResult) -> String {
    let multi = fit.layout.factors.len() > 1;
    let mut rows = Vec::new();
    for f in &fit.layout.factors {
        for (x, v, fixed) in fit.factor_loadings(f) {
            let item = if multi { format!("{}.{}", f, x) } else { x };
            rows.push((item, format!("{:.3}", v), fixed));
        }
    }
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(4).max(4);
    let mut s = format!("{:<width$}  {:>9}\n", "item", "estimate", width = width);
    for (item, v, fixed) in rows {
        let mark = if fixed { "  (fixed)" } else { "" };
        s.push_str(&format!("{:<width$}  {:>9}{}\n", item, v, mark, width = width));
    }
    s
}

fn fit(a: &FitArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let fit = fit_from_args(a)?;
    out.write_all(loading_table(&fit).as_bytes())?;
    writeln!(
        err,
        "discrepancy {:.6}, iterations {}, {}",
        fit.discrepancy, fit.iterations, fit.message
    )?;
    if !fit.active_bounds.is_empty() {
        writeln!(err, "on bounds: {}", fit.active_bounds.join(", "))?;
    }
    if fit.converged {
        Ok(0)
    } else {
        writeln!(err, "error: estimation did not converge")?;
        Ok(2)
    }
}

fn simulate(a: &SimulateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let truth = make_condition(a.condition)?;
    let runs = a
        .runs
        .split(',')
        .map(|t| RunSpec::parse(t.trim(), &truth))
        .collect::<Result<Vec<_>>>()?;
    let data_kind = match &a.thresholds {
        None => DataKind::Continuous,
        Some(t) => DataKind::Ordinal {
            thresholds: t
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| CfaError::InvalidArgument(format!("--thresholds: bad value `{}`", v)))
                })
                .collect::<Result<Vec<_>>>()?,
        },
    };
    let config = SimulationConfig {
        n: a.n,
        replicates: a.reps,
        base_seed: a.seed,
        data_kind,
        exact_fit: a.exact_fit,
        workers: a.workers,
        ..SimulationConfig::for_condition(a.condition, runs)?
    };
    let table = run_simulation(&config)?;
    let manifest = run_manifest(&table);
    match &a.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| CfaError::Io(format!("{}: {}", path.display(), e)))?;
            emit_dcr_table(&table, BufWriter::new(file))?;
            let mut m = path.clone().into_os_string();
            m.push(".manifest.txt");
            std::fs::write(&m, &manifest)?;
        }
        None => {
            emit_dcr_table(&table, &mut *out)?;
        }
    }
    err.write_all(manifest.as_bytes())?;
    Ok(0)
}
