use thiserror::Error;

/// Errors raised across the simulation and integration modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("thinning envelope violated: acceptance probability {ratio} > 1 for move ({from} -> {to}) with occupancies ({k}, {l})")]
    EnvelopeViolation {
        ratio: f64,
        from: usize,
        to: usize,
        k: u32,
        l: u32,
    },

    #[error("particle conservation violated after event {event}: total {observed} != {expected}")]
    ConservationViolated {
        event: u64,
        observed: u64,
        expected: u64,
    },

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("integrator failure at step {step} (t = {time}): {reason}")]
    IntegratorFailure {
        step: usize,
        time: f64,
        reason: String,
    },

    #[error("time {0} is not an observation time of the ensemble")]
    UnobservedTime(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("assembly error: {0}")]
    Assembly(String),

    #[error(
        "covariance instability at t = {time}: smallest eigenvalue {min_eigenvalue} (norm {norm})"
    )]
    Instability {
        time: f64,
        min_eigenvalue: f64,
        norm: f64,
    },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
