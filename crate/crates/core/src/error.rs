use thiserror::Error;

/// Errors raised by the library. Validation failures map to CLI exit code 2.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid offspring law: {0}")]
    InvalidOffspring(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("lattice step mismatch: {left} vs {right}")]
    StepMismatch { left: String, right: String },

    #[error("lattice step {0} does not divide 1")]
    StepDoesNotDivideOne(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("resource cap exceeded: {0}")]
    CapExceeded(String),

    #[error("bracket not established: {0}")]
    BracketNotEstablished(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

impl Error {
    /// True for errors caused by bad input rather than by an inconclusive computation.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::CapExceeded(_) | Error::BracketNotEstablished(_) | Error::InsufficientData(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
