//! Federated speculative decoding with top-K compressed worker uploads.
//!
//! A draft model proposes γ tokens, workers score them and upload top-K
//! truncated distributions, and the server aggregates those into a target
//! distribution for accept/reject verification.

pub mod aggregation;
pub mod compression;
pub mod decode;
pub mod dist;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod transport;

pub use error::{DecodeError, Error, FrameError, Result};
