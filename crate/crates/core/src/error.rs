use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{name} must be strictly positive, got {value}")]
    NonPositiveVariance { name: &'static str, value: f64 },

    #[error("{name} must be non-negative, got {value}")]
    NegativeVariance { name: &'static str, value: f64 },

    #[error("horizon must be non-negative, got {0}")]
    NegativeHorizon(i64),

    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },

    #[error("invalid transmitter moments: {0}")]
    InvalidMoments(String),

    #[error("invalid receiver error covariance: {0}")]
    InvalidCovariance(String),

    #[error("invalid step coefficients: {0}")]
    InvalidCoeffs(String),

    #[error("degenerate state: transmitter variance {sigma_u2:e} is at or below the numerical floor")]
    DegenerateState { sigma_u2: f64 },

    #[error("singular innovation variance {0:e}")]
    SingularInnovation(f64),

    #[error("minimizer {c} landed on the search bracket edge [{lo}, {hi}]; widen the bracket")]
    BracketTooNarrow { c: f64, lo: f64, hi: f64 },

    #[error("invalid search spec: {0}")]
    InvalidSearchSpec(String),

    #[error("policy table has {got} steps but the horizon is {expected}")]
    HorizonMismatch { expected: usize, got: usize },

    #[error("horizon {got} is outside the supported range {min}..={max}")]
    HorizonOutOfRange { got: usize, min: usize, max: usize },

    #[error("at least {min} trials are required, got {got}")]
    TooFewTrials { min: u64, got: u64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
