use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// `p` puts non-negligible mass on an entry where `q` vanishes.
    #[error("divergence is infinite: p[{index}] = {mass:e} where q vanishes")]
    DivergenceInfinite { index: usize, mass: f64 },

    #[error("numeric fault in {0}")]
    NumericFault(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("environment fault: {0}")]
    Environment(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
