//! Ordinal data: thresholds, polychoric correlations and weighted
//! least-squares fitting on the latent-response scale.

mod bvn;
mod dwls;
mod polychoric;

pub use bvn::bivariate_normal_cdf;
pub use dwls::{fit_dwls, implied_correlation_vector, wls_discrepancy};
pub use polychoric::{
    estimate_polychoric, estimate_thresholds, polychoric_matrix, PolychoricEstimate,
    PolychoricSummary, RHO_LIMIT, RHO_TOLERANCE,
};
