use thiserror::Error;

/// Errors produced by the watermarking toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("probability vector is empty")]
    EmptyDistribution,

    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },

    #[error("probabilities sum to {sum}, expected 1")]
    NotNormalized { sum: f64 },

    #[error("order is not a bijection on 0..{len}")]
    InvalidPermutation { len: usize },

    #[error("vocabulary must contain at least one token")]
    EmptyVocabulary,

    #[error("vocabulary has {size} tokens but {labels} labels")]
    LabelCountMismatch { size: usize, labels: usize },

    #[error("token id {id} is outside a vocabulary of size {size}")]
    OutOfVocab { id: u32, size: usize },

    #[error("size mismatch: expected {expected}, got {got}")]
    SizeMismatch { expected: usize, got: usize },

    #[error("secret key must be at least 16 bytes, got {0}")]
    KeyTooShort(usize),

    #[error("secret key is not valid hex: {0}")]
    InvalidKeyHex(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid reweight strategy '{0}'")]
    InvalidStrategy(String),

    #[error("no preceding token available to form a texture key")]
    NoContext,

    #[error("alpha = 1 leaves the single-quantile reweight undefined")]
    DegenerateAlpha,

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("top-k mass is zero")]
    AllZeroTopK,

    #[error("sequence of length {len} is too short to score (need at least 2 tokens)")]
    SequenceTooShort { len: usize },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
