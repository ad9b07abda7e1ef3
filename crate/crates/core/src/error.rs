use thiserror::Error;

/// Errors raised while building measures, barriers, rules or certificates.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The measure description violates a structural invariant.
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    /// The origin carries all of the mass; `tau = 0` is the only embedding.
    #[error("origin mass {0} >= 1 leaves nothing to embed")]
    TrivialTarget(f64),

    /// A spinning measure is malformed (negative entries, wrong total, unknown ray).
    #[error("invalid spinning measure: {0}")]
    InvalidSpinning(String),

    /// The pair (target, kappa) is not centered.
    #[error("spinning measure is not centered: max deviation {deviation:e} exceeds {tolerance:e}")]
    NotCentered { deviation: f64, tolerance: f64 },

    /// A ray carries weight but no positive barycenter.
    #[error("ray `{0}` has zero barycenter")]
    DegenerateRay(String),

    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported target: {0}")]
    Unsupported(String),

    /// A numerical construction could not be certified at the requested accuracy.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
