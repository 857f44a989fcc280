//! Confirmatory factor analysis with maximum likelihood and diagonally
//! weighted least squares, plus tools for studying the sign of estimated
//! loadings across Monte Carlo replicates.

pub mod categorical;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod linalg;
pub mod ml;
pub mod model;
pub mod normal;
pub mod optim;
pub mod sign;
pub mod simulation;

pub use error::{CfaError, Result};
