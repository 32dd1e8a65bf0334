use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A map iterate left its domain.
    #[error(
        "step fault in {family} map at unit {unit:?}, step {step:?}: value {value} left the domain"
    )]
    StepFault {
        family: &'static str,
        value: f64,
        unit: Option<usize>,
        step: Option<u64>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("branch inversion failed at y = {y}: {reason}")]
    BranchInversion { y: f64, reason: String },

    #[error("Chebyshev order exceeded cap {cap} (tail {tail:e})")]
    OrderExplosion { cap: usize, tail: f64 },

    #[error("mass renormalization factor {factor} outside tolerance")]
    MassDrift { factor: f64 },

    #[error(
        "no convergence after {iterations} iterations (last iterate {last}, residual {residual:e})"
    )]
    NoConvergence {
        iterations: usize,
        last: f64,
        residual: f64,
    },

    #[error("autocovariance not embeddable: {0}")]
    NotEmbeddable(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Attaches unit and step indices to a step fault raised by a kernel.
    pub(crate) fn at_unit(self, unit: usize, step: u64) -> Self {
        match self {
            Error::StepFault { family, value, .. } => Error::StepFault {
                family,
                value,
                unit: Some(unit),
                step: Some(step),
            },
            other => other,
        }
    }
}
