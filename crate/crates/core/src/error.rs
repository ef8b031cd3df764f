use thiserror::Error;

/// Errors raised anywhere in the model, simulation, pricing or scenario layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: loss level {level} exceeds barrier {barrier}")]
    State { level: f64, barrier: f64 },

    #[error("grid error: {0}")]
    Grid(String),

    #[error("rng error: {0}")]
    Rng(String),

    #[error("intensity bound violated: rate {rate} at t={t}, level={level} exceeds declared bound {bound}")]
    Bound { rate: f64, bound: f64, t: f64, level: f64 },

    #[error("coefficient bound violated: |{name}| = {value} exceeds declared bound {bound}")]
    CoefficientBound { name: &'static str, value: f64, bound: f64 },

    #[error("step error at t={t}, T={maturity}, x={barrier}: {reason}")]
    Step { t: f64, maturity: f64, barrier: f64, reason: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("degenerate rate: delta_k * L_k = 0 for k={k}, barrier index {i}")]
    DegenerateRate { k: usize, i: usize },

    #[error("degenerate annuity {annuity:e}: tranche is fully written down")]
    DegenerateAnnuity { annuity: f64 },

    #[error("quadrature failed to converge: {0}")]
    Quadrature(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient paths: {0}")]
    InsufficientPaths(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
