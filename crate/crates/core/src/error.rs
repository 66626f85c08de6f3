use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("node {node} has no out-edges; row normalization needs n_i >= 1")]
    IsolatedNode { node: usize },

    #[error("parameters are not stationary (max|beta| + max|nu| = {0:.6} >= 1)")]
    NonStationary(f64),

    #[error("group {group} is empty")]
    EmptyGroup { group: usize },

    #[error("loss is zero; log-loss criterion is undefined (add a positive noise floor)")]
    ZeroLoss,

    #[error("non-positive residual degrees of freedom ({0})")]
    NoDegreesOfFreedom(i64),

    #[error("no restart produced a finite loss")]
    NoFiniteFit,

    #[error("{0}")]
    Unsupported(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
