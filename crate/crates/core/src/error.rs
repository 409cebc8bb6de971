use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("conditioning set has too little mass: {accepted} of {drawn} samples accepted")]
    LowMass { accepted: usize, drawn: usize },

    #[error("no vertex qualifies for the certificate graph")]
    EmptyCertificate,

    #[error("input too close to a routing boundary (score gap {gap:e} < required {required:e})")]
    RoutingBoundary { gap: f64, required: f64 },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
