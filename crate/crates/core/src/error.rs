use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Overlength { len: usize, max: usize },
    #[error("unknown token id {id} (vocab size {vocab})")]
    UnknownToken { id: u32, vocab: usize },
    #[error("no answer span present and warm-up fallback is disabled")]
    NoAnswerSpan,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
