use glied_metrics::MetricError;
use glied_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate attention mask: {0}")]
    DegenerateMask(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint version error: {0}")]
    Version(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
