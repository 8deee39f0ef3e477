use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: index {index} out of bounds (limit {limit})")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("unknown module identifier `{0}`")]
    UnknownModule(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("input of {len} tokens exceeds context length {limit}")]
    ContextOverflow { len: usize, limit: usize },

    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
