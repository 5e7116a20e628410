use thiserror::Error;

/// Errors raised anywhere in the engine, models, data layer, or training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("missing gradient for `{0}`")]
    MissingGrad(String),
    #[error("invalid label {0}: labels must be 0 or 1")]
    Label(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
