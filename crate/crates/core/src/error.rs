use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("corpus contains no records")]
    EmptyCorpus,
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("token id {id} is outside the vocabulary (size {size})")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("invalid triple: {0}")]
    InvalidTriple(String),
    #[error("gold triple {0} is not in the knowledge base (stale knowledge base?)")]
    MissingTriple(String),
    #[error("cannot power-normalize an all-zero symbol block")]
    ZeroBlock,
    #[error("symbol block is not power-normalized (mean power {power})")]
    NotNormalized { power: f64 },
    #[error("channel coefficient is zero")]
    ZeroChannel,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("classifier was trained against knowledge base {expected}, found {found}")]
    StaleKnowledgeBase { expected: String, found: String },
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("language-model client error: {0}")]
    Llm(String),
    #[error("similarity scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
