//! Direction of loading estimates relative to their true values.
//!
//! An estimate of exactly zero counts as positive; such ties are counted
//! separately so they stay visible.

use std::fmt;

use crate::error::{CfaError, Result};
use crate::model::{IdentificationStrategy, LoadingRef, ModelSpec, ParamStatus};

/// Sign agreement for one loading across replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct DcrRecord {
    /// Position in the truth vector.
    pub index: usize,
    pub truth: f64,
    /// Estimates whose sign equals the sign of `truth`.
    pub m: usize,
    pub n: usize,
    /// `100 · m / n`.
    pub dcr: f64,
    /// Estimates that were exactly zero.
    pub zero_ties: usize,
}

/// Relation of one estimated loading vector to the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FlipClass {
    Match,
    GlobalFlip,
    Mixed,
}

impl fmt::Display for FlipClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlipClass::Match => "match",
            FlipClass::GlobalFlip => "global_flip",
            FlipClass::Mixed => "mixed",
        })
    }
}

fn positive(v: f64) -> bool {
    v >= 0.0
}

fn check_truth(truth: &[f64]) -> Result<()> {
    if let Some(i) = truth.iter().position(|t| *t == 0.0 || !t.is_finite()) {
        return Err(CfaError::InvalidArgument(format!(
            "true loading {} must be non-zero",
            i
        )));
    }
    Ok(())
}

/// Directional consistency rate per loading over replicate estimates.
pub fn dcr(estimates: &[Vec<f64>], truth: &[f64]) -> Result<Vec<DcrRecord>> {
    check_truth(truth)?;
    if estimates.is_empty() {
        return Err(CfaError::InvalidArgument("no estimates".into()));
    }
    if let Some(e) = estimates.iter().find(|e| e.len() != truth.len()) {
        return Err(CfaError::DimensionMismatch(format!(
            "estimate of length {} against truth of length {}",
            e.len(),
            truth.len()
        )));
    }
    Ok(truth
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let m = estimates
                .iter()
                .filter(|e| positive(e[i]) == positive(t))
                .count();
            let zero_ties = estimates.iter().filter(|e| e[i] == 0.0).count();
            let n = estimates.len();
            DcrRecord {
                index: i,
                truth: t,
                m,
                n,
                dcr: 100.0 * m as f64 / n as f64,
                zero_ties,
            }
        })
        .collect())
}

/// `Match` when every sign equals the truth, `GlobalFlip` when every sign
/// is reversed, `Mixed` otherwise.
pub fn classify_flip(estimate: &[f64], truth: &[f64]) -> Result<FlipClass> {
    if estimate.len() != truth.len() {
        return Err(CfaError::DimensionMismatch(format!(
            "estimate of length {} against truth of length {}",
            estimate.len(),
            truth.len()
        )));
    }
    check_truth(truth)?;
    let agree = estimate
        .iter()
        .zip(truth)
        .filter(|(e, t)| positive(**e) == positive(**t))
        .count();
    Ok(if agree == truth.len() {
        FlipClass::Match
    } else if agree == 0 {
        FlipClass::GlobalFlip
    } else {
        FlipClass::Mixed
    })
}

/// Makes `anchor` the loading fixed at 1 for its factor. Other directives
/// are kept; a start value for the anchor is dropped.
pub fn anchor_reorder(spec: &ModelSpec, anchor: &LoadingRef) -> Result<ModelSpec> {
    let mut out = spec.clone();
    let loading = out.loading_mut(anchor).ok_or_else(|| CfaError::UnknownAnchor {
        factor: anchor.factor.clone(),
        indicator: anchor.indicator.clone(),
    })?;
    match loading.status {
        ParamStatus::Fixed(v) if v != 1.0 => {
            return Err(CfaError::IdentificationConflict(anchor.factor.clone()))
        }
        _ => loading.status = ParamStatus::Fixed(1.0),
    }
    out.loading_starts.remove(anchor);
    Ok(out)
}

/// Spec and strategy for fitting with a positive anchor loading.
pub fn positive_anchor(spec: &ModelSpec, anchor: &LoadingRef) -> Result<(ModelSpec, IdentificationStrategy)> {
    Ok((
        anchor_reorder(spec, anchor)?,
        IdentificationStrategy::FixedAnchorLoading(vec![anchor.clone()]),
    ))
}
