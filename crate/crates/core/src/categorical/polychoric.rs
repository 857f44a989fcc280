//! Thresholds and polychoric correlations, estimated in two steps.

use std::cmp::Ordering;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::bvn::bvn;
use crate::datagen::{Dataset, ThresholdSet};
use crate::error::{CfaError, Result};
use crate::normal;
use crate::optim::minimize_scalar;

/// Largest admissible `|ρ|`.
pub const RHO_LIMIT: f64 = 1.0 - 1e-6;
/// Absolute tolerance of the `ρ` search.
pub const RHO_TOLERANCE: f64 = 1e-8;

/// `v_c = Φ⁻¹(P(code < c))` for `c = 1..C−1`.
pub fn estimate_thresholds(codes: &[usize], categories: usize) -> Result<Vec<f64>> {
    thresholds_named(codes, categories, "")
}

fn thresholds_named(codes: &[usize], categories: usize, name: &str) -> Result<Vec<f64>> {
    if categories < 2 {
        return Err(CfaError::InvalidArgument(format!(
            "need at least 2 categories, got {}",
            categories
        )));
    }
    let counts = category_counts(codes, categories, name)?;
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(CfaError::DegenerateCategory {
            variable: name.to_string(),
            category: c,
        });
    }
    let n = codes.len() as f64;
    let mut cumulative = 0usize;
    let t: Vec<f64> = counts[..categories - 1]
        .iter()
        .map(|&k| {
            cumulative += k;
            normal::quantile(cumulative as f64 / n)
        })
        .collect();
    if t.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(CfaError::ThresholdsNotIncreasing);
    }
    Ok(t)
}

fn category_counts(codes: &[usize], categories: usize, name: &str) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; categories];
    for &c in codes {
        if c >= categories {
            return Err(CfaError::Data(format!(
                "code {} out of range for `{}` with {} categories",
                c, name, categories
            )));
        }
        counts[c] += 1;
    }
    Ok(counts)
}

/// Result of one pairwise search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolychoricEstimate {
    pub rho: f64,
    /// Maximized two-step log-likelihood.
    pub log_likelihood: f64,
    /// The maximum sits on `±RHO_LIMIT`.
    pub at_boundary: bool,
}

/// Maximizes the contingency-table likelihood over `ρ` with thresholds
/// held fixed.
///
/// Swapping the two columns (and their thresholds) gives the identical
/// result: the table is first put in a canonical orientation.
pub fn estimate_polychoric(
    col_i: &[usize],
    col_j: &[usize],
    thr_i: &[f64],
    thr_j: &[f64],
) -> Result<PolychoricEstimate> {
    pair_estimate(col_i, col_j, thr_i, thr_j, (0, 1))
}

fn pair_estimate(
    col_i: &[usize],
    col_j: &[usize],
    thr_i: &[f64],
    thr_j: &[f64],
    pair: (usize, usize),
) -> Result<PolychoricEstimate> {
    if col_i.len() != col_j.len() {
        return Err(CfaError::DimensionMismatch(format!(
            "columns have {} and {} rows",
            col_i.len(),
            col_j.len()
        )));
    }
    for t in [thr_i, thr_j] {
        if t.is_empty() || t.iter().any(|v| !v.is_finite()) {
            return Err(CfaError::InvalidArgument("thresholds must be finite and non-empty".into()));
        }
        if t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CfaError::ThresholdsNotIncreasing);
        }
    }
    let (ri, rj) = (thr_i.len() + 1, thr_j.len() + 1);
    let mut table = DMatrix::<f64>::zeros(ri, rj);
    for (&a, &b) in col_i.iter().zip(col_j) {
        if a >= ri || b >= rj {
            return Err(CfaError::Data(format!("code out of range in pair {:?}", pair)));
        }
        table[(a, b)] += 1.0;
    }
    let nonempty = |sums: Vec<f64>| sums.iter().filter(|&&s| s > 0.0).count();
    let rows = nonempty(table.row_iter().map(|r| r.sum()).collect());
    let cols = nonempty(table.column_iter().map(|c| c.sum()).collect());
    if rows < 2 || cols < 2 {
        return Err(CfaError::DegenerateTable(pair.0, pair.1));
    }

    let transposed = table.transpose();
    let (table, thr_a, thr_b) = match orientation_key(thr_i, thr_j, &table)
        .cmp(&orientation_key(thr_j, thr_i, &transposed))
    {
        Ordering::Greater => (transposed, thr_j, thr_i),
        _ => (table, thr_i, thr_j),
    };

    let edges = |t: &[f64]| {
        let mut e = Vec::with_capacity(t.len() + 2);
        e.push(f64::NEG_INFINITY);
        e.extend_from_slice(t);
        e.push(f64::INFINITY);
        e
    };
    let (ea, eb) = (edges(thr_a), edges(thr_b));
    let negative_ll = |rho: f64| -log_likelihood(&table, &ea, &eb, rho);

    let (rho, f) = minimize_scalar(negative_ll, -RHO_LIMIT, RHO_LIMIT, RHO_TOLERANCE)?;
    let mut best = (rho, f, false);
    for end in [-RHO_LIMIT, RHO_LIMIT] {
        let fe = negative_ll(end);
        if fe <= best.1 {
            best = (end, fe, true);
        }
    }
    Ok(PolychoricEstimate {
        rho: best.0,
        log_likelihood: -best.1,
        at_boundary: best.2,
    })
}

/// Lexicographic key over thresholds then cell counts.
fn orientation_key(a: &[f64], b: &[f64], table: &DMatrix<f64>) -> Vec<TotalF64> {
    let mut key: Vec<TotalF64> = Vec::with_capacity(a.len() + b.len() + table.len() + 2);
    key.push(TotalF64(a.len() as f64));
    key.extend(a.iter().map(|&v| TotalF64(v)));
    key.push(TotalF64(b.len() as f64));
    key.extend(b.iter().map(|&v| TotalF64(v)));
    key.extend(table.row_iter().flat_map(|r| r.iter().map(|&v| TotalF64(v)).collect::<Vec<_>>()));
    key
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TotalF64(f64);

impl Eq for TotalF64 {}

impl PartialOrd for TotalF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TotalF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn log_likelihood(table: &DMatrix<f64>, ea: &[f64], eb: &[f64], rho: f64) -> f64 {
    // cumulative probabilities at every pair of edges
    let grid = DMatrix::from_fn(ea.len(), eb.len(), |a, b| bvn(ea[a], eb[b], rho));
    let mut ll = 0.0;
    for a in 0..table.nrows() {
        for b in 0..table.ncols() {
            let n = table[(a, b)];
            if n > 0.0 {
                let p = grid[(a + 1, b + 1)] - grid[(a, b + 1)] - grid[(a + 1, b)] + grid[(a, b)];
                ll += n * p.max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    ll
}

/// Thresholds, polychoric correlations and DWLS weights for a set of
/// ordinal variables.
///
/// `weight_diag` runs over the correlations above the diagonal in row
/// order: `(0,1), (0,2), …, (1,2), …`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolychoricSummary {
    pub variables: Vec<String>,
    pub thresholds: ThresholdSet,
    pub correlation: DMatrix<f64>,
    pub weight_diag: DVector<f64>,
    /// Pairs whose estimate was clamped to `±RHO_LIMIT`.
    pub boundary_pairs: Vec<(usize, usize)>,
}

impl PolychoricSummary {
    /// Builds a summary from given moments with unit weights.
    pub fn new(variables: Vec<String>, thresholds: ThresholdSet, correlation: DMatrix<f64>) -> Result<Self> {
        let p = variables.len();
        if correlation.shape() != (p, p) || thresholds.thresholds.len() != p {
            return Err(CfaError::DimensionMismatch(format!(
                "{} variables, correlation {:?}, {} threshold vectors",
                p,
                correlation.shape(),
                thresholds.thresholds.len()
            )));
        }
        for i in 0..p {
            if correlation[(i, i)] != 1.0 {
                return Err(CfaError::InvalidArgument("correlation diagonal must be 1".into()));
            }
            for j in 0..i {
                let r = correlation[(i, j)];
                if r != correlation[(j, i)] || !(r.abs() < 1.0) {
                    return Err(CfaError::InvalidArgument(format!(
                        "correlation ({}, {}) must be symmetric and inside (-1, 1)",
                        i, j
                    )));
                }
            }
        }
        Ok(Self {
            variables,
            thresholds,
            correlation,
            weight_diag: DVector::from_element(p * (p - 1) / 2, 1.0),
            boundary_pairs: Vec::new(),
        })
    }

    pub fn p(&self) -> usize {
        self.variables.len()
    }

    /// Replaces the unit weights by a user-supplied diagonal.
    pub fn with_weights(mut self, weights: DVector<f64>) -> Result<Self> {
        let k = self.p() * (self.p() - 1) / 2;
        if weights.len() != k {
            return Err(CfaError::DimensionMismatch(format!(
                "{} weights for {} correlations",
                weights.len(),
                k
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(CfaError::InvalidArgument("weights must be positive".into()));
        }
        self.weight_diag = weights;
        Ok(self)
    }

    /// Correlations above the diagonal, row order.
    pub fn correlation_vector(&self) -> DVector<f64> {
        lower_free(&self.correlation)
    }

    /// Long-format table with columns `kind,row,col,value`; `kind` is
    /// `threshold` (col = threshold index, from 1), `correlation` or
    /// `weight`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "row", "col", "value"])?;
        for (name, t) in self.variables.iter().zip(&self.thresholds.thresholds) {
            for (c, v) in t.iter().enumerate() {
                w.write_record(["threshold", name, &(c + 1).to_string(), &v.to_string()])?;
            }
        }
        let p = self.p();
        let mut k = 0;
        for i in 0..p {
            for j in (i + 1)..p {
                let (a, b) = (&self.variables[i], &self.variables[j]);
                w.write_record(["correlation", a, b, &self.correlation[(i, j)].to_string()])?;
                w.write_record(["weight", a, b, &self.weight_diag[k].to_string()])?;
                k += 1;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn lower_free(m: &DMatrix<f64>) -> DVector<f64> {
    let p = m.nrows();
    let mut v = Vec::with_capacity(p * (p.saturating_sub(1)) / 2);
    for i in 0..p {
        for j in (i + 1)..p {
            v.push(m[(i, j)]);
        }
    }
    DVector::from_vec(v)
}

/// Thresholds per variable, then every pairwise polychoric correlation.
///
/// Pairs are estimated in parallel; the result does not depend on the
/// number of threads.
pub fn polychoric_matrix(data: &Dataset) -> Result<PolychoricSummary> {
    let p = data.p();
    if p < 2 {
        return Err(CfaError::InvalidArgument("need at least 2 variables".into()));
    }
    let columns: Vec<Vec<usize>> = (0..p).map(|j| data.codes(j)).collect();
    let thresholds = (0..p)
        .map(|j| {
            let c = data.categories(j).ok_or_else(|| {
                CfaError::Data(format!("`{}` is not ordinal", data.variables[j]))
            })?;
            thresholds_named(&columns[j], c, &data.variables[j])
        })
        .collect::<Result<Vec<_>>>()?;

    let pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
        .collect();
    let estimates = pairs
        .par_iter()
        .map(|&(i, j)| pair_estimate(&columns[i], &columns[j], &thresholds[i], &thresholds[j], (i, j)))
        .collect::<Result<Vec<_>>>()?;

    let mut correlation = DMatrix::identity(p, p);
    let mut boundary_pairs = Vec::new();
    for (&(i, j), e) in pairs.iter().zip(&estimates) {
        correlation[(i, j)] = e.rho;
        correlation[(j, i)] = e.rho;
        if e.at_boundary {
            boundary_pairs.push((i, j));
        }
    }
    let mut summary = PolychoricSummary::new(
        data.variables.clone(),
        ThresholdSet::new(thresholds)?,
        correlation,
    )?;
    summary.boundary_pairs = boundary_pairs;
    Ok(summary)
}
