use thiserror::Error;

/// Crate-wide error type. Variants map 1:1 onto the CLI exit-code categories.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),
    #[error("eigensolver did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("unsupported op: {0}")]
    UnsupportedOp(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("unknown label: {0}")]
    Label(String),
    #[error("data: {0}")]
    Data(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
