use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid simulation parameters: {0}")]
    InvalidParams(String),
    #[error("numerical blowup at step {step}: |u| exceeded {limit:e}")]
    NumericalBlowup { step: u64, limit: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("strong key of {len} characters does not fit a {dims}x{dims} lattice")]
    DoesNotFit { len: usize, dims: usize },
    #[error("invalid strong key: {0}")]
    InvalidKey(String),
    #[error("secure entropy source unavailable")]
    EntropyUnavailable,
    #[error("separation between trajectories collapsed to zero")]
    DegenerateSeparation,
    #[error("split-state section has wrong length: expected {expected} bytes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("password must not be empty")]
    EmptyPassword,
    #[error("authentication failed")]
    AuthFailure,
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("encryption self-check failed after {attempts} attempts")]
    SelfCheckExhausted { attempts: u32 },
    #[error("decrypt session expired")]
    SessionExpired,
}
