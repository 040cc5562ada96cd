use thiserror::Error;

#[derive(Debug, Error)]
pub enum RsfdError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("empty captions for {video_id}")]
    EmptyCaptions { video_id: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range (vocabulary size {size})")]
    IdOutOfRange { id: usize, size: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("uninitialized normalization statistics")]
    UninitializedBatchNorm,
    #[error("zero-norm embedding for token '{0}': cosine similarity undefined")]
    ZeroNormEmbedding(String),
    #[error("diffusion requires high-frequency tokens")]
    NoHighFrequencyTokens,
    #[error("all loss positions masked")]
    AllPositionsMasked,
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: String, expected: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("non-finite loss at batch {0}")]
    NonFiniteLoss(usize),
    #[error("empty hypothesis set")]
    EmptyHypotheses,
    #[error("IDF undefined: corpus must contain at least 2 videos")]
    IdfUndefined,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RsfdError>;
