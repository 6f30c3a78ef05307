use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("structural error in tree {id}: {msg}")]
    Structure { id: String, msg: String },

    #[error("capacity exceeded: {got} tokens, limit {limit}")]
    Capacity { got: usize, limit: usize },

    #[error("utterance not covered by the controlled grammar: {0}")]
    Unparseable(String),

    #[error("decoupling failed for {id}: {msg}")]
    Decouple { id: String, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("bad configuration: {0}")]
    Config(String),

    #[error("generation failed: {0}")]
    Generate(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
