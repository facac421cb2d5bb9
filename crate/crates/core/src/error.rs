//! Error types shared across the crate.

use std::io;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding a top-K payload body.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("payload truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("payload has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("vocabulary size {0} is below the minimum of 2")]
    VocabTooSmall(u32),
    #[error("payload carries no entries")]
    Empty,
    #[error("k = {k} exceeds vocabulary size {vocab_size}")]
    KExceedsVocab { k: u32, vocab_size: u32 },
    #[error("token id {token} out of range for vocabulary size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: u32 },
    #[error("duplicate token id {0}")]
    DuplicateToken(u32),
    #[error("negative probability {value} for token {token}")]
    NegativeProbability { token: u32, value: f32 },
    #[error("non-finite probability for token {0}")]
    NonFiniteProbability(u32),
    #[error("entries not in (probability desc, token id asc) order at position {0}")]
    Unordered(usize),
    #[error("retained mass {0} outside (0, 1]")]
    MassOutOfRange(f64),
}

/// Failures while reading or parsing a transport frame.
#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame body of {0} bytes exceeds the 64 MiB limit")]
    Oversize(u64),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed {kind} body: {reason}")]
    MalformedBody { kind: &'static str, reason: String },
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("k = {k} out of range for vocabulary size {vocab_size}")]
    KOutOfRange { k: usize, vocab_size: usize },
    #[error("retained mass is zero")]
    ZeroRetainedMass,
    #[error("degenerate residual: target does not exceed draft anywhere")]
    DegenerateResidual,
    #[error("draft token {token} has zero draft probability")]
    ZeroDraftProbability { token: u32 },
    #[error("payload decode failed: {0}")]
    Decode(#[from] DecodeError),
    #[error("frame error: {0}")]
    Frame(#[from] FrameError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("worker {worker} ({endpoint}) failed: {reason}")]
    Worker {
        worker: usize,
        endpoint: String,
        reason: String,
    },
    #[error("model provider failed: {0}")]
    Model(String),
    #[error("trace exhausted after {steps} steps")]
    TraceExhausted { steps: usize },
    #[error("malformed trace: {0}")]
    Trace(String),
    #[error("instrumentation data missing: {0}")]
    Instrumentation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
