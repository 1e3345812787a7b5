use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("softmax row {row} has no finite entry (no valid attention target)")]
    NoValidTarget { row: usize },

    #[error("row {row} has norm {norm:e}, below the 1e-12 floor")]
    DegenerateRow { row: usize, norm: f32 },

    #[error("kv cache: {0}")]
    Cache(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
