use thiserror::Error;

/// Errors produced across data ingestion, model construction, training and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown token id {0}")]
    UnknownTokenId(usize),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("input has no real (non-padding) tokens")]
    AllPadding,

    #[error("no masked positions")]
    NoMaskedPositions,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("gold out of range: index {gold} with {count} candidates")]
    GoldOutOfRange { gold: usize, count: usize },

    #[error("vocabulary mismatch: checkpoint has {expected}, data has {found}")]
    VocabularyMismatch { expected: String, found: String },

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFinite { step: usize, diagnostics: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
