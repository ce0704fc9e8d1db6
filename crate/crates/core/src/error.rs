use thiserror::Error;

/// Errors raised anywhere in the sampler, metrics or harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} lies outside [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),

    #[error("non-finite state for particle {particle} at step {step}")]
    NonFiniteState { particle: usize, step: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("weight collapse: {0}")]
    WeightCollapse(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short name for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "domain",
            Error::NonFiniteInput(_) => "non_finite_input",
            Error::NonFiniteState { .. } => "non_finite_state",
            Error::Dimension { .. } => "dimension",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::NotPositiveDefinite(_) => "not_positive_definite",
            Error::WeightCollapse(_) => "weight_collapse",
            Error::Config { .. } => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput(what))
    }
}
