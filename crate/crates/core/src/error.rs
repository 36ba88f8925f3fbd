use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied settings (bad spec, bad config value, missing input).
    #[error("configuration error: {0}")]
    Config(String),
    /// An index or dimension outside the admissible range.
    #[error("range error: {0}")]
    Range(String),
    /// Input data that cannot support the requested computation.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{n} samples cannot be split into {k} equal folds")]
    Divisibility { n: usize, k: usize },
    #[error("matrix of size {size} is not positive definite even with jitter {max_jitter:e}")]
    NumericalRank { size: usize, max_jitter: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for errors caused by the caller's settings rather than by the numerics.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Range(_) | Error::Divisibility { .. } | Error::Toml(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn range_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Range(msg.into()))
}
