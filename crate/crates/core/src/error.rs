use thiserror::Error;

/// Errors raised across model parsing, estimation and simulation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CfaError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("unknown variable `{name}` at line {line}")]
    UnknownVariable { name: String, line: usize },

    #[error("duplicate directive at line {line}: {message}")]
    DuplicateDirective { line: usize, message: String },

    #[error("invalid bound at line {line}: lower {lower} > upper {upper}")]
    InvalidBound { line: usize, lower: f64, upper: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unknown anchor {factor}.{indicator}")]
    UnknownAnchor { factor: String, indicator: String },

    #[error("identification conflict for factor `{0}`")]
    IdentificationConflict(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not positive definite (leading minor {minor} failed)")]
    NotPositiveDefinite { minor: usize },

    #[error("implied covariance is singular or not positive definite")]
    SingularImplied,

    #[error("sample covariance is not positive definite")]
    SampleNotPositiveDefinite,

    #[error("negative residual variance for indicator `{0}`")]
    NegativeResidual(String),

    #[error("non-finite function value at parameter {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("thresholds are not increasing")]
    ThresholdsNotIncreasing,

    #[error("threshold count mismatch for `{variable}`: expected {expected}, got {got}")]
    ThresholdCount {
        variable: String,
        expected: usize,
        got: usize,
    },

    #[error("degenerate category {category} in `{variable}`")]
    DegenerateCategory { variable: String, category: usize },

    #[error("degenerate contingency table for pair ({0}, {1})")]
    DegenerateTable(usize, usize),

    #[error("start values missing for free loading {0}")]
    MissingStart(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CfaError {
    fn from(e: std::io::Error) -> Self {
        CfaError::Io(e.to_string())
    }
}

impl From<csv::Error> for CfaError {
    fn from(e: csv::Error) -> Self {
        CfaError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CfaError>;
