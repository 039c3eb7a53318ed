use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("kv cache does not match model: {0}")]
    CacheMismatch(String),
    #[error("repetition penalty must be >= 1, got {0}")]
    InvalidPenalty(f32),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("attention pair violates causality: to {to} > from {from}")]
    Causality { from: usize, to: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty feature store")]
    EmptyStore,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("loss became NaN at step {0}")]
    NanLoss(usize),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("tokenizer mismatch: {0}")]
    TokenizerMismatch(String),
    #[error("overlapping spans cannot be encoded: {0}")]
    OverlappingSpans(String),
    #[error("invalid label `{0}`")]
    InvalidLabel(String),
    #[error("length mismatch: {0} gold vs {1} predicted documents")]
    LengthMismatch(usize, usize),
    #[error("empty support set")]
    EmptySupport,
    #[error("invalid gazetteer: {0}")]
    InvalidGazetteer(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("missing probe for {0}")]
    MissingProbe(&'static str),
    #[error("stream already finished")]
    StreamFinished,
    #[error("invalid pipeline config: {0}")]
    InvalidPipeline(String),
    #[error("invalid benchmark request: {0}")]
    InvalidBench(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
