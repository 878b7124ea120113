use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A hard instance was requested outside the parameter range where its
    /// guarantee applies; the message names the violated clause.
    #[error("invalid instance: {0}")]
    InstanceInvalid(String),

    #[error("iterate diverged at step {step}")]
    Divergence { step: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("nonpositive quantile {q} at delta {delta}; cannot fit a log-log slope")]
    NonPositiveQuantile { delta: f64, q: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::Error::Config(alloc::format!($($arg)*)) };
}

macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::Error::Domain(alloc::format!($($arg)*)) };
}

macro_rules! precondition_err {
    ($($arg:tt)*) => { $crate::Error::Precondition(alloc::format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use domain_err;
pub(crate) use precondition_err;
