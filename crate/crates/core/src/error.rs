use thiserror::Error;

/// Errors raised by the library.
///
/// The variants map one-to-one onto the failure modes callers are expected to
/// distinguish (the CLI turns them into exit codes).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("exp overflow: matrix exponential exceeds floating-point range")]
    ExpOverflow,

    #[error("operator not in Q: smallest eigenvalue real part is {0}")]
    NotInQ(f64),

    #[error("zero has no polar decomposition")]
    ZeroPoint,

    #[error("gamma out of range: {0} is not in (0, 1)")]
    GammaOutOfRange(f64),

    #[error("kernel not positive: value {value} at {point:?}")]
    KernelNotPositive { point: Vec<f64>, value: f64 },

    #[error("integrand singularity inside cell centred at {0:?}")]
    IntegrandSingularity(Vec<f64>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("field not well defined at point {0:?}")]
    FieldUndefined(Vec<f64>),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
