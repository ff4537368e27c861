use thiserror::Error;

/// Errors produced across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("graph is empty")]
    EmptyGraph,

    #[error("triple ({head}, {relation}, {tail}) cannot be reconstructed from the given entities")]
    NotReconstructible {
        head: String,
        relation: String,
        tail: String,
    },

    #[error("token alignment error: {0}")]
    Alignment(String),

    #[error("tokenization error: {0}")]
    Tokenization(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("gateway returned {code}: {message}")]
    Gateway { code: u16, message: String },

    #[error("enumeration exceeds {limit} leaves")]
    EnumerationTooLarge { limit: usize },

    #[error("index {index} out of range (len {len})")]
    Bounds { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("operation not applicable: {0}")]
    NotApplicable(String),

    #[error("could not extract a triple from step {step}: {message}")]
    Extraction { step: usize, message: String },

    #[error("no viable candidate among {0}")]
    NoViableCandidate(usize),

    #[error("reasoning failed: {message}")]
    Engine {
        message: String,
        /// JSON rendering of the partial trace at the point of failure.
        trace: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
