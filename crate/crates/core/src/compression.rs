//! Top-K truncation of worker distributions, the payload wire body, and the
//! two server-side reconstructions.
//!
//! A worker keeps only its `k` most probable tokens. The server sees those
//! tokens with their probabilities and rebuilds a full distribution either by
//! rescaling the retained entries to sum to one ([`Strategy::Renormalized`])
//! or by spreading the missing mass evenly over the tokens it did not receive
//! ([`Strategy::ResidualUniform`]).

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::dist::{Distribution, TokenId, SUM_TOLERANCE, WIRE_TOLERANCE};
use crate::error::{DecodeError, Error, Result};

/// Server-side reconstruction of a truncated distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Renormalized,
    ResidualUniform,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::Renormalized, Strategy::ResidualUniform];

    pub fn code(self) -> u8 {
        match self {
            Strategy::Renormalized => 0,
            Strategy::ResidualUniform => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Strategy::Renormalized),
            1 => Some(Strategy::ResidualUniform),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Renormalized => "renormalized",
            Strategy::ResidualUniform => "residual-uniform",
        }
    }

    pub fn reconstruct(self, payload: &TopKPayload) -> Result<Distribution> {
        match self {
            Strategy::Renormalized => reconstruct_renormalized(payload),
            Strategy::ResidualUniform => reconstruct_residual_uniform(payload),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "renormalized" => Ok(Strategy::Renormalized),
            "residual-uniform" | "residual_uniform" => Ok(Strategy::ResidualUniform),
            other => Err(Error::InvalidParameter(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Numerical provenance of payload probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Taken directly from a 64-bit distribution.
    Exact,
    /// Rounded through the 32-bit wire encoding.
    Wire,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::Exact => SUM_TOLERANCE,
            Precision::Wire => WIRE_TOLERANCE,
        }
    }
}

/// The `k` retained (token, probability) pairs of one worker distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKPayload {
    vocab_size: usize,
    entries: Vec<(TokenId, f64)>,
    precision: Precision,
}

/// Retained and residual probability mass of a payload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassSplit {
    pub rho: f64,
    pub epsilon: f64,
}

impl TopKPayload {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_lossless(&self) -> bool {
        self.entries.len() == self.vocab_size
    }

    /// Size of [`encode_payload`] output for this payload.
    pub fn encoded_len(&self) -> usize {
        encoded_len(self.entries.len())
    }
}

pub fn encoded_len(k: usize) -> usize {
    8 + 8 * k
}

fn rank_order(a: &(TokenId, f64), b: &(TokenId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Keeps the `k` most probable tokens of `d`, ties going to the lower id.
pub fn truncate_topk(d: &Distribution, k: usize) -> Result<TopKPayload> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, vocab_size: n });
    }
    let mut ranked: Vec<(TokenId, f64)> = d
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &p)| (TokenId(i as u32), p))
        .collect();
    if k < n {
        ranked.select_nth_unstable_by(k - 1, rank_order);
        ranked.truncate(k);
    }
    ranked.sort_unstable_by(rank_order);
    Ok(TopKPayload {
        vocab_size: n,
        entries: ranked,
        precision: Precision::Exact,
    })
}

pub fn mass_split(p: &TopKPayload) -> MassSplit {
    let rho: f64 = p.entries.iter().map(|e| e.1).sum();
    // rounding can push the retained mass past one; the residual never goes negative
    let epsilon = if p.is_lossless() { 0.0 } else { (1.0 - rho).max(0.0) };
    MassSplit { rho, epsilon }
}

fn scatter(p: &TopKPayload, fill: f64) -> Vec<f64> {
    let mut probs = vec![fill; p.vocab_size];
    for &(token, prob) in &p.entries {
        probs[token.index()] = prob;
    }
    probs
}

/// Retained entries divided by the retained mass; zero elsewhere.
pub fn reconstruct_renormalized(p: &TopKPayload) -> Result<Distribution> {
    if p.is_lossless() {
        return Distribution::with_tolerance(scatter(p, 0.0), p.precision.tolerance());
    }
    let MassSplit { rho, .. } = mass_split(p);
    if rho <= 0.0 {
        return Err(Error::ZeroRetainedMass);
    }
    let mut probs = vec![0.0; p.vocab_size];
    for &(token, prob) in &p.entries {
        probs[token.index()] = prob / rho;
    }
    Distribution::with_tolerance(probs, p.precision.tolerance())
}

/// Retained entries as transmitted; the residual mass shared equally by the
/// `|V| - k` tokens that were not transmitted. With `k = |V|` there is no
/// tail and the entries are returned unchanged.
pub fn reconstruct_residual_uniform(p: &TopKPayload) -> Result<Distribution> {
    if p.is_lossless() {
        return Distribution::with_tolerance(scatter(p, 0.0), p.precision.tolerance());
    }
    let MassSplit { epsilon, .. } = mass_split(p);
    let tail = epsilon / (p.vocab_size - p.k()) as f64;
    Distribution::with_tolerance(scatter(p, tail), p.precision.tolerance())
}

/// Little-endian body: `u32 vocab_size, u32 k, k × (u32 token, f32 prob)`.
///
/// Entries are written in (f32 probability desc, id asc) order so the
/// encoding is canonical even when two probabilities collapse to the same
/// 32-bit value.
pub fn encode_payload(p: &TopKPayload) -> Vec<u8> {
    let mut narrowed: Vec<(TokenId, f32)> =
        p.entries.iter().map(|&(t, v)| (t, v as f32)).collect();
    narrowed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out = Vec::with_capacity(p.encoded_len());
    out.extend_from_slice(&(p.vocab_size as u32).to_le_bytes());
    out.extend_from_slice(&(narrowed.len() as u32).to_le_bytes());
    for (token, prob) in narrowed {
        out.extend_from_slice(&token.0.to_le_bytes());
        out.extend_from_slice(&prob.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses a payload body and checks every payload invariant.
pub fn decode_payload(bytes: &[u8]) -> Result<TopKPayload, DecodeError> {
    if bytes.len() < 8 {
        return Err(DecodeError::Truncated {
            needed: 8,
            available: bytes.len(),
        });
    }
    let vocab_size = read_u32(bytes, 0);
    let k = read_u32(bytes, 4);
    if vocab_size < 2 {
        return Err(DecodeError::VocabTooSmall(vocab_size));
    }
    if k == 0 {
        return Err(DecodeError::Empty);
    }
    if k > vocab_size {
        return Err(DecodeError::KExceedsVocab { k, vocab_size });
    }
    let needed = 8 + 8 * k as usize;
    if bytes.len() < needed {
        return Err(DecodeError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(DecodeError::TrailingBytes {
            extra: bytes.len() - needed,
        });
    }

    let mut seen = std::collections::HashSet::with_capacity(k as usize);
    let mut entries = Vec::with_capacity(k as usize);
    let mut prev: Option<(u32, f32)> = None;
    for (i, chunk) in bytes[8..].chunks_exact(8).enumerate() {
        let token = read_u32(chunk, 0);
        let prob = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        if token >= vocab_size {
            return Err(DecodeError::TokenOutOfRange { token, vocab_size });
        }
        if !seen.insert(token) {
            return Err(DecodeError::DuplicateToken(token));
        }
        if !prob.is_finite() {
            return Err(DecodeError::NonFiniteProbability(token));
        }
        if prob < 0.0 {
            return Err(DecodeError::NegativeProbability { token, value: prob });
        }
        if let Some((prev_token, prev_prob)) = prev {
            if prob > prev_prob || (prob == prev_prob && token < prev_token) {
                return Err(DecodeError::Unordered(i));
            }
        }
        prev = Some((token, prob));
        entries.push((TokenId(token), prob as f64));
    }

    let rho: f64 = entries.iter().map(|e| e.1).sum();
    if !(rho > 0.0 && rho <= 1.0 + WIRE_TOLERANCE) {
        return Err(DecodeError::MassOutOfRange(rho));
    }
    Ok(TopKPayload {
        vocab_size: vocab_size as usize,
        entries,
        precision: Precision::Wire,
    })
}

/// Encodes then decodes, giving the payload exactly as the server receives it.
pub fn wire_roundtrip(p: &TopKPayload) -> Result<TopKPayload> {
    Ok(decode_payload(&encode_payload(p))?)
}
