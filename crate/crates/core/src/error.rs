use dpt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DptError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("archive: {0}")]
    Archive(String),
    #[error("image: {0}")]
    Image(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DptError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> DptError {
    DptError::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> DptError {
    DptError::Input(msg.into())
}
