//! Draft generation, acceptance, and accept/reject verification with
//! residual resampling.

use crate::dist::{overlap, sample_from, Distribution, TokenId, UniformSource};
use crate::error::{Error, Result};
use crate::models::{prefix_hash, ModelProvider};

const RESIDUAL_FLOOR: f64 = 1e-12;

/// Prompt plus every committed token. Never holds uncommitted drafts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrefixState {
    tokens: Vec<TokenId>,
}

impl PrefixState {
    pub fn new(prompt: Vec<TokenId>) -> Self {
        Self { tokens: prompt }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn commit(&mut self, tokens: &[TokenId]) {
        self.tokens.extend_from_slice(tokens);
    }

    pub fn checksum(&self) -> u64 {
        prefix_hash(&self.tokens)
    }
}

/// γ draft tokens with the draft distributions they were sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftBlock {
    tokens: Vec<TokenId>,
    draft_dists: Vec<Distribution>,
}

impl DraftBlock {
    pub fn new(tokens: Vec<TokenId>, draft_dists: Vec<Distribution>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidParameter("draft block is empty".into()));
        }
        if tokens.len() != draft_dists.len() {
            return Err(Error::DimensionMismatch {
                left: tokens.len(),
                right: draft_dists.len(),
            });
        }
        for (t, q) in tokens.iter().zip(&draft_dists) {
            if q.prob(*t) <= 0.0 {
                return Err(Error::ZeroDraftProbability { token: t.0 });
            }
        }
        Ok(Self {
            tokens,
            draft_dists,
        })
    }

    pub fn gamma(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn draft_dists(&self) -> &[Distribution] {
        &self.draft_dists
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationOutcome {
    /// Number of draft tokens accepted, in `0..=γ`.
    pub accepted_count: usize,
    /// Accepted prefix followed by exactly one resampled or bonus token.
    pub emitted_tokens: Vec<TokenId>,
    /// Zero-based draft position of the first rejection, if any.
    pub rejection_step: Option<usize>,
    /// `min(1, p̄_t(x_t) / q_t(x_t))` for each examined position.
    pub per_step_accept_prob: Vec<f64>,
}

impl VerificationOutcome {
    pub fn examined_steps(&self) -> usize {
        self.per_step_accept_prob.len()
    }
}

/// Samples γ tokens autoregressively from the draft model.
pub fn generate_draft(
    draft_model: &dyn ModelProvider,
    prefix: &PrefixState,
    gamma: usize,
    rng: &mut dyn UniformSource,
) -> Result<DraftBlock> {
    if gamma == 0 {
        return Err(Error::InvalidParameter("gamma must be at least 1".into()));
    }
    let mut context = prefix.tokens().to_vec();
    let mut tokens = Vec::with_capacity(gamma);
    let mut dists = Vec::with_capacity(gamma);
    for _ in 0..gamma {
        let q = draft_model.next_distribution(&context)?;
        let x = sample_from(&q, rng);
        context.push(x);
        tokens.push(x);
        dists.push(q);
    }
    DraftBlock::new(tokens, dists)
}

/// α = Σ_x min(p̄(x), q(x)).
pub fn acceptance_rate(p_bar: &Distribution, q: &Distribution) -> Result<f64> {
    overlap(p_bar, q)
}

/// Normalized positive part of `p̄ − q`.
pub fn residual_distribution(p_bar: &Distribution, q: &Distribution) -> Result<Distribution> {
    if p_bar.len() != q.len() {
        return Err(Error::DimensionMismatch {
            left: p_bar.len(),
            right: q.len(),
        });
    }
    let surplus: Vec<f64> = p_bar
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(p, q)| (p - q).max(0.0))
        .collect();
    let largest = surplus.iter().copied().fold(0.0, f64::max);
    if largest <= RESIDUAL_FLOOR {
        return Err(Error::DegenerateResidual);
    }
    let total: f64 = surplus.iter().sum();
    Distribution::new(surplus.into_iter().map(|s| s / total).collect())
}

/// Verifies a draft block against the aggregated target distributions.
///
/// `aggregated` holds γ+1 distributions: one per draft position plus the
/// bonus position. Randomness is consumed in a fixed order: one uniform per
/// examined position, then one uniform for the resampled or bonus token.
pub fn verify_block(
    draft: &DraftBlock,
    aggregated: &[Distribution],
    rng: &mut dyn UniformSource,
) -> Result<VerificationOutcome> {
    let gamma = draft.gamma();
    if aggregated.len() != gamma + 1 {
        return Err(Error::DimensionMismatch {
            left: gamma + 1,
            right: aggregated.len(),
        });
    }
    let mut emitted = Vec::with_capacity(gamma + 1);
    let mut accept_probs = Vec::with_capacity(gamma);
    for (t, (&x, q)) in draft.tokens.iter().zip(&draft.draft_dists).enumerate() {
        let p_bar = &aggregated[t];
        if p_bar.len() != q.len() {
            return Err(Error::DimensionMismatch {
                left: q.len(),
                right: p_bar.len(),
            });
        }
        let qx = q.prob(x);
        if qx <= 0.0 {
            return Err(Error::ZeroDraftProbability { token: x.0 });
        }
        let ratio = (p_bar.prob(x) / qx).min(1.0);
        accept_probs.push(ratio);
        if rng.next_uniform() < ratio {
            emitted.push(x);
            continue;
        }
        let replacement = match residual_distribution(p_bar, q) {
            Ok(r) => sample_from(&r, rng),
            Err(Error::DegenerateResidual) => sample_from(p_bar, rng),
            Err(e) => return Err(e),
        };
        emitted.push(replacement);
        return Ok(VerificationOutcome {
            accepted_count: t,
            emitted_tokens: emitted,
            rejection_step: Some(t),
            per_step_accept_prob: accept_probs,
        });
    }
    emitted.push(sample_from(&aggregated[gamma], rng));
    Ok(VerificationOutcome {
        accepted_count: gamma,
        emitted_tokens: emitted,
        rejection_step: None,
        per_step_accept_prob: accept_probs,
    })
}
