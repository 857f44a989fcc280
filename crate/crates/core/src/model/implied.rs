use nalgebra::{DMatrix, DVector};

use super::{Param, ParameterLayout};
use crate::error::{CfaError, Result};

/// Loadings `Λ` (p×m), factor covariance `Φ` (m×m), residual variances
/// (diagonal of `Θ`) and intercepts `τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMatrices {
    pub loadings: DMatrix<f64>,
    pub factor_cov: DMatrix<f64>,
    pub residuals: DVector<f64>,
    pub intercepts: DVector<f64>,
}

impl ModelMatrices {
    pub fn from_layout(layout: &ParameterLayout, theta: &[f64]) -> Result<Self> {
        if theta.len() != layout.n_free() {
            return Err(CfaError::DimensionMismatch(format!(
                "parameter vector has {} entries, layout has {} free",
                theta.len(),
                layout.n_free()
            )));
        }
        let p = layout.n_indicators();
        let m = layout.n_factors();
        let mut out = ModelMatrices {
            loadings: DMatrix::zeros(p, m),
            factor_cov: DMatrix::zeros(m, m),
            residuals: DVector::zeros(p),
            intercepts: DVector::zeros(p),
        };
        for (entry, value) in layout.entries.iter().zip(layout.resolve(theta)) {
            match entry.param {
                Param::Loading { factor, indicator } => out.loadings[(indicator, factor)] = value,
                Param::FactorVariance(k) => out.factor_cov[(k, k)] = value,
                Param::FactorCovariance(k, l) => {
                    out.factor_cov[(k, l)] = value;
                    out.factor_cov[(l, k)] = value;
                }
                Param::ResidualVariance(i) => out.residuals[i] = value,
                Param::Intercept(i) => out.intercepts[i] = value,
            }
        }
        Ok(out)
    }

    /// `ΛΦΛ'`, the common part of the implied covariance.
    pub fn common_covariance(&self) -> DMatrix<f64> {
        let c = &self.loadings * &self.factor_cov * self.loadings.transpose();
        (&c + c.transpose()) * 0.5
    }

    /// `Σ = ΛΦΛ' + Θ`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mut sigma = self.common_covariance();
        for i in 0..sigma.nrows() {
            sigma[(i, i)] += self.residuals[i];
        }
        sigma
    }
}

/// Model-implied covariance `Σ(θ) = ΛΦΛ' + Θ` with diagonal `Θ`.
pub fn implied_covariance(layout: &ParameterLayout, theta: &[f64]) -> Result<DMatrix<f64>> {
    let mats = ModelMatrices::from_layout(layout, theta)?;
    for (i, entry) in layout.entries.iter().enumerate() {
        if let Param::ResidualVariance(x) = entry.param {
            let v = mats.residuals[x];
            if v < 0.0 && layout.entries[i].lower >= 0.0 {
                return Err(CfaError::NegativeResidual(layout.indicators[x].clone()));
            }
        }
    }
    Ok(mats.covariance())
}
