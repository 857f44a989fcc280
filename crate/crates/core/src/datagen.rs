//! Synthetic data: multivariate-normal draws from a population model and
//! their discretization into ordinal codes through thresholds.
//!
//! Random numbers come from ChaCha8 seeded with a 64-bit value; replicate
//! `r` of a run with base seed `b` uses `b ^ r`. Normal variates are made by
//! the inverse-CDF method from 53-bit uniforms, one variate per uniform, so
//! a stream is consumed in a fixed order regardless of rejection sampling.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CfaError, Result};
use crate::linalg::{cholesky_factor, mat_vec_mul};
use crate::model::{implied_covariance, ModelMatrices, ParameterLayout, VariableKind};
use crate::normal;

pub use crate::linalg::cholesky_factor as cholesky;

/// Observed data, one row per observation.
///
/// Ordinal columns hold integer codes `0..C` stored as exact floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub variables: Vec<String>,
    pub kinds: Vec<VariableKind>,
    pub values: DMatrix<f64>,
}

impl Dataset {
    pub fn new(variables: Vec<String>, kinds: Vec<VariableKind>, values: DMatrix<f64>) -> Result<Self> {
        if variables.len() != values.ncols() || kinds.len() != values.ncols() {
            return Err(CfaError::DimensionMismatch(format!(
                "{} names, {} kinds, {} columns",
                variables.len(),
                kinds.len(),
                values.ncols()
            )));
        }
        if values.nrows() == 0 {
            return Err(CfaError::Data("dataset has no rows".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CfaError::Data("dataset has missing or non-finite cells".into()));
        }
        for (j, kind) in kinds.iter().enumerate() {
            if let VariableKind::Ordinal { categories } = kind {
                for v in values.column(j).iter() {
                    if v.fract() != 0.0 || *v < 0.0 || *v >= *categories as f64 {
                        return Err(CfaError::Data(format!(
                            "code {} out of range for `{}` with {} categories",
                            v, variables[j], categories
                        )));
                    }
                }
            }
        }
        Ok(Self {
            variables,
            kinds,
            values,
        })
    }

    pub fn continuous(variables: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        let kinds = vec![VariableKind::Continuous; variables.len()];
        Self::new(variables, kinds, values)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_ordinal(&self) -> bool {
        self.kinds
            .iter()
            .all(|k| matches!(k, VariableKind::Ordinal { .. }))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    /// Integer codes of an ordinal column.
    pub fn codes(&self, j: usize) -> Vec<usize> {
        self.values.column(j).iter().map(|v| *v as usize).collect()
    }

    pub fn categories(&self, j: usize) -> Option<usize> {
        match self.kinds[j] {
            VariableKind::Ordinal { categories } => Some(categories),
            VariableKind::Continuous => None,
        }
    }

    pub fn means(&self) -> DVector<f64> {
        let n = self.n() as f64;
        DVector::from_iterator(self.p(), self.values.column_iter().map(|c| c.sum() / n))
    }

    /// Columns reordered to `names`.
    pub fn select(&self, names: &[&str]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|name| {
                self.variables
                    .iter()
                    .position(|v| v == name)
                    .ok_or_else(|| CfaError::Data(format!("variable `{}` not in data", name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            variables: idx.iter().map(|&j| self.variables[j].clone()).collect(),
            kinds: idx.iter().map(|&j| self.kinds[j]).collect(),
            values: self.values.select_columns(&idx),
        })
    }

    /// Treats every column as ordinal with `max code + 1` categories (or the
    /// given count when larger).
    pub fn into_ordinal(self, categories: &[Option<usize>]) -> Result<Self> {
        let kinds = (0..self.p())
            .map(|j| {
                let observed = self.values.column(j).max() as usize + 1;
                let c = categories.get(j).copied().flatten().unwrap_or(observed).max(observed);
                VariableKind::Ordinal { categories: c }
            })
            .collect();
        Self::new(self.variables, kinds, self.values)
    }

    /// Reverses ordinal codes, `c → C − 1 − c`.
    pub fn reverse_codes(&self) -> Result<Self> {
        let mut values = self.values.clone();
        for j in 0..self.p() {
            let c = self
                .categories(j)
                .ok_or_else(|| CfaError::Data(format!("`{}` is not ordinal", self.variables[j])))?;
            for v in values.column_mut(j).iter_mut() {
                *v = (c - 1) as f64 - *v;
            }
        }
        Self::new(self.variables.clone(), self.kinds.clone(), values)
    }

    /// Header of variable names, then one row per observation.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.variables)?;
        for row in self.values.row_iter() {
            let cells: Vec<String> = row
                .iter()
                .zip(&self.kinds)
                .map(|(v, k)| match k {
                    VariableKind::Ordinal { .. } => format!("{}", *v as i64),
                    VariableKind::Continuous => format!("{}", v),
                })
                .collect();
            w.write_record(&cells)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a CSV written by [`Dataset::write_csv`]; every column comes
    /// back continuous.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let variables: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut cells = Vec::new();
        let mut n = 0;
        for (i, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != variables.len() {
                return Err(CfaError::Data(format!("row {} has {} cells", i + 1, record.len())));
            }
            for (j, c) in record.iter().enumerate() {
                let v: f64 = c.parse().map_err(|_| {
                    CfaError::Data(format!("row {}, `{}`: cannot parse `{}`", i + 1, variables[j], c))
                })?;
                cells.push(v);
            }
            n += 1;
        }
        let p = variables.len();
        Self::continuous(variables, DMatrix::from_row_slice(n, p, &cells))
    }
}

/// Finite cut points per variable; variable `j` with `C` categories has
/// `C − 1` strictly increasing thresholds and implicit `±∞` ends.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub thresholds: Vec<Vec<f64>>,
}

impl ThresholdSet {
    pub fn new(thresholds: Vec<Vec<f64>>) -> Result<Self> {
        for t in &thresholds {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(CfaError::InvalidArgument("thresholds must be finite".into()));
            }
            if t.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(CfaError::ThresholdsNotIncreasing);
            }
        }
        Ok(Self { thresholds })
    }

    /// Same thresholds for `p` variables.
    pub fn uniform(p: usize, thresholds: &[f64]) -> Result<Self> {
        Self::new(vec![thresholds.to_vec(); p])
    }

    /// Thresholds splitting a normal with standard deviation `sd` into `C`
    /// equally likely categories.
    pub fn equal_probability(sds: &[f64], categories: usize) -> Result<Self> {
        if categories < 2 {
            return Err(CfaError::InvalidArgument("need at least 2 categories".into()));
        }
        Self::new(
            sds.iter()
                .map(|sd| {
                    (1..categories)
                        .map(|c| sd * normal::quantile(c as f64 / categories as f64))
                        .collect()
                })
                .collect(),
        )
    }

    pub fn categories(&self, j: usize) -> usize {
        self.thresholds[j].len() + 1
    }
}

/// Seed of replicate `r` derived from a base seed.
pub fn replicate_seed(base_seed: u64, replicate: u64) -> u64 {
    base_seed ^ replicate
}

/// Standard normal stream over ChaCha8.
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform on the open interval (0, 1) with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next(&mut self) -> f64 {
        normal::quantile(self.uniform())
    }
}

/// Draws `n` rows from `N(τ, Σ(θ))` of the population model.
pub fn generate_continuous(
    layout: &ParameterLayout,
    theta: &[f64],
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(CfaError::InvalidArgument("sample size must be at least 1".into()));
    }
    let sigma = implied_covariance(layout, theta)?;
    let mats = ModelMatrices::from_layout(layout, theta)?;
    sample_mvn(&mats.intercepts, &sigma, &layout.indicators, n, seed)
}

/// Draws `n` rows from `N(mean, sigma)`.
pub fn sample_mvn(
    mean: &DVector<f64>,
    sigma: &DMatrix<f64>,
    names: &[String],
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    let l = cholesky_factor(sigma)?;
    let p = sigma.nrows();
    let mut stream = NormalStream::new(seed);
    let mut values = DMatrix::zeros(n, p);
    let mut z = vec![0.0; p];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = stream.next();
        }
        let x = mat_vec_mul(&l, &z) + mean;
        values.set_row(i, &x.transpose());
    }
    Dataset::continuous(names.to_vec(), values)
}

/// Cuts continuous columns at thresholds: code `c` iff `v_c ≤ x < v_{c+1}`.
pub fn discretize_to_ordinal(data: &Dataset, thresholds: &ThresholdSet) -> Result<Dataset> {
    if thresholds.thresholds.len() != data.p() {
        return Err(CfaError::DimensionMismatch(format!(
            "{} threshold vectors for {} variables",
            thresholds.thresholds.len(),
            data.p()
        )));
    }
    let mut kinds = Vec::with_capacity(data.p());
    for (j, t) in thresholds.thresholds.iter().enumerate() {
        if t.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(CfaError::ThresholdsNotIncreasing);
        }
        if let VariableKind::Ordinal { categories } = data.kinds[j] {
            if t.len() + 1 != categories {
                return Err(CfaError::ThresholdCount {
                    variable: data.variables[j].clone(),
                    expected: categories - 1,
                    got: t.len(),
                });
            }
        }
        kinds.push(VariableKind::Ordinal {
            categories: t.len() + 1,
        });
    }
    let mut values = data.values.clone();
    for (j, t) in thresholds.thresholds.iter().enumerate() {
        for v in values.column_mut(j).iter_mut() {
            *v = t.partition_point(|c| *c <= *v) as f64;
        }
    }
    Dataset::new(data.variables.clone(), kinds, values)
}

/// Unbiased sample covariance (denominator `n − 1`).
pub fn sample_covariance(data: &Dataset) -> Result<DMatrix<f64>> {
    let n = data.n();
    if n < 2 {
        return Err(CfaError::Data(format!(
            "sample covariance needs at least 2 rows, got {}",
            n
        )));
    }
    let means = data.means();
    let mut centered = data.values.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    let s = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((&s + s.transpose()) * 0.5)
}
