use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::DataError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("negative time gap {0}")]
    NegativeDelta(f64),
    #[error("visit has {n_u} codes but n_u_max is {n_u_max}")]
    TooManyCodes { n_u: usize, n_u_max: usize },
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("training diverged at epoch {epoch}: loss {loss} exceeds {limit}")]
    Divergence { epoch: usize, loss: f64, limit: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
