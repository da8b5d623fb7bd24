use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("mean parameters outside the interior of the domain: {0}")]
    OutOfDomain(String),

    #[error("index {index} out of range for {len} outcomes")]
    Index { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate mixture component {component} (mean responsibility {mass:e})")]
    DegenerateComponent { component: usize, mass: f64 },

    #[error("non-finite gradient encountered; descent aborted")]
    NonFiniteGradient,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("all {0} restarts aborted")]
    FitFailure(usize),
}

pub type Result<T> = std::result::Result<T, Error>;
