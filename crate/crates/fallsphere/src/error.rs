use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("index mismatch: {0}")]
    IndexMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("discretization mismatch: {0}")]
    DiscretizationMismatch(String),
    #[error("unresolved boundary: {0}")]
    UnresolvedBoundary(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("no crossing found: {0}")]
    NoCrossing(String),
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("branch out of range: {0}")]
    BranchOutOfRange(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
