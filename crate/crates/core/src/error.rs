use thiserror::Error;

/// Errors raised by tensor-train construction, geometry and solver routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index:?} out of bounds for dimensions {dims:?}")]
    IndexOutOfBounds { index: Vec<usize>, dims: Vec<usize> },

    #[error("invalid ranks: {0}")]
    InvalidRanks(String),

    #[error("dense materialisation of {entries} entries exceeds the budget of {budget}")]
    DenseBudget { entries: u128, budget: usize },

    #[error("core {core} is rank deficient (ratio {ratio:.3e})")]
    RankDeficient { core: usize, ratio: f64 },

    #[error("unfolding {k} is not defined for an order-{d} tensor")]
    InvalidUnfolding { k: usize, d: usize },

    #[error("invalid sample set: {0}")]
    InvalidSamples(String),

    #[error("search direction vanishes on every observed entry")]
    InvisibleDirection,

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
