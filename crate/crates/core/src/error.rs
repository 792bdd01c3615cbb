use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("state space too large: {size} instances exceeds the limit of {limit}")]
    StateSpaceTooLarge { size: u128, limit: u128 },

    #[error("family has no valid instances")]
    EmptyFamily,

    #[error("graph contains a MASK label where clean labels are required")]
    MaskLabelPresent,

    #[error("acceptance rate too low: {0}")]
    AcceptanceRateTooLow(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("critic undefined: both data and prediction densities are zero")]
    UndefinedCritic,

    #[error("MASK labels survived to t=1 ({0} slots)")]
    MaskResidue(usize),

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
