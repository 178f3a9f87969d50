use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("degenerate distribution (sample range {range:.3e})")]
    DegenerateDistribution { range: f64 },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("non-finite value in input")]
    NonFinite,

    #[error("no background rectangle found after {tries} tries")]
    NoValidRect { tries: usize },

    #[error("refinement produced no usable difference signal")]
    EmptyRefinement,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("word `{0}` cannot be tokenized with the toy vocabulary")]
    UnknownWord(String),

    #[error("backend not ready: {0}")]
    BackendNotReady(String),

    #[error("stage dependency not satisfied: {0}")]
    Dependency(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl ToString) -> Self {
        Error::Format { path: path.as_ref().display().to_string(), reason: reason.to_string() }
    }
}
