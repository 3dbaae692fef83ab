use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("softmax slice {slice} is fully masked")]
    FullyMasked { slice: usize },
    #[error("model dim {dim} is not divisible by {heads} heads")]
    IndivisibleHeads { dim: usize, heads: usize },
    #[error("index {index} out of range for {len} classes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("duplicate parameter name {0}")]
    DuplicateParameter(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("sequence length {len} exceeds positional table size {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite training loss at epoch {epoch}; offending parameter: {param}")]
    NonFiniteLoss { epoch: usize, param: String },

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload while reading {context}")]
    Truncated { context: &'static str },
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("insufficient history: window needs {needed} frames before the stream start, {deficit} missing")]
    InsufficientHistory { needed: usize, deficit: usize },
    #[error("stream ends at t={stream_end} before window end t={window_end}")]
    StreamTooShort { stream_end: f64, window_end: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("attention trace is not from a token-variant fuser")]
    NotTokenTrace,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Config(_) | Invalid(_) | IndivisibleHeads { .. } => ErrorKind::Usage,
            ShapeMismatch { .. }
            | InvalidShape { .. }
            | NonFinite { .. }
            | FullyMasked { .. }
            | BackwardTwice
            | NotScalar(_)
            | NonFiniteLoss { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}
