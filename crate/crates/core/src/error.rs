use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A configuration key failed validation. `path` is the dotted key path.
    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("level labelling is ambiguous: {0}")]
    Labeling(String),

    #[error("count distribution truncated at {limit}: lost tail mass {lost_mass:e} exceeds bound")]
    Truncation { limit: usize, lost_mass: f64 },

    #[error("insufficient statistics: {accepted} of {attempted} trials accepted")]
    InsufficientStatistics { accepted: u64, attempted: u64 },

    #[error("optimizer did not converge after {iterations} iterations (best log-likelihood {best_value})")]
    NotConverged {
        iterations: usize,
        best_value: f64,
        best_point: Vec<f64>,
    },

    #[error("conclusive region is empty: {0}")]
    EmptyConclusiveRegion(String),

    #[error("conditioning event has zero probability")]
    ZeroProbabilityCondition,

    #[error("insufficient jumps: {0}")]
    InsufficientJumps(String),

    #[error("unknown species `{0}`")]
    UnknownSpecies(String),

    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
