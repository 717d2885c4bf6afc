use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss([usize; 2]),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("dangling relevant article ids: {}", .0.join(", "))]
    DanglingIds(Vec<String>),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown article `{0}`")]
    UnknownArticle(String),

    #[error("node `{0}` is not in the graph")]
    UnknownNode(String),

    #[error("unknown configuration `{name}`; valid names: {}", .valid.join(", "))]
    UnknownConfig { name: String, valid: Vec<String> },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss(_) => ErrorKind::Numerical,
            Error::Config(_) | Error::UnknownConfig { .. } => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::Shape {
            op,
            detail: detail.to_string(),
        }
    }
}
