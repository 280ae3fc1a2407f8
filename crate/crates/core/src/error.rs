use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {shapes:?}")]
    Shape {
        node: usize,
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    #[error("invalid tensor: shape {shape:?} needs {expected} values, got {got}")]
    TensorData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("empty token sequence")]
    EmptyTokens,

    #[error("token index {index} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { index: usize, vocab_size: usize },

    #[error("attention is not available in uniform attention mode")]
    UniformAttention,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("no support items remain after masking")]
    EmptySupport,

    #[error("non-finite adaptation loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite meta-loss")]
    NonFiniteMetaLoss,

    #[error("target answer distribution unreachable for category `{0}`")]
    Unreachable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
