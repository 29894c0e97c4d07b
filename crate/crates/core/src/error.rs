use tensorlab::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QmvosError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("config field `{field}`: {detail}")]
    Config { field: String, detail: String },
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QmvosError>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(QmvosError::Input(msg.into()))
}

pub(crate) fn config<T>(field: &str, detail: impl Into<String>) -> Result<T> {
    Err(QmvosError::Config {
        field: field.to_string(),
        detail: detail.into(),
    })
}
