use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("zero-norm vector in {0}")]
    Norm(&'static str),

    #[error("loss mask selects no positions")]
    DegenerateLoss,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("unknown token {0:?}")]
    Tokenizer(String),

    #[error("no exemplar for vocabulary term {0:?}")]
    Provenance(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Dimension {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Input(String),

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
}
