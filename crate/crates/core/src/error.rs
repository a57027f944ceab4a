use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("need at least two categories for the layers to be identifiable (got K = {0})")]
    TooFewCategories(usize),

    #[error("data must be column-centred before computing the block covariance")]
    NotCentered,

    #[error("{what} is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { what: String, asymmetry: f64 },

    #[error("{0} is not positive definite")]
    NotPositiveDefinite(String),

    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("graphical lasso failed for layer {layer} at EM iteration {iteration}: {source}")]
    Glasso {
        iteration: usize,
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("cross-validation fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("every grid point failed: {}", .0.join("; "))]
    AllGridPointsFailed(Vec<String>),

    #[error(
        "no zero off-diagonal pairs left to fill ({requested} requested, {available} available)"
    )]
    Saturated { requested: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
