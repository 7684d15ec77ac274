use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// `Data` covers input validation (bad files, inconsistent corpora, invalid
/// configuration); `Numeric` covers NaN aborts and other floating-point
/// failures. The CLI maps these onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {details}")]
    Shape {
        node: usize,
        op: String,
        details: String,
    },

    #[error("NaN produced at node {node} ({op})")]
    Nan { node: usize, op: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("missing parameters: {0:?}")]
    MissingParams(Vec<String>),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
