//! Probability-model providers standing in for the draft model and the
//! worker LLMs.

mod markov;
mod synthetic;
mod trace;

pub use markov::{markov_next, parse_corpus, MarkovModel};
pub use synthetic::{synthetic_logits, SyntheticModel, SyntheticModelSpec};
pub use trace::{read_trace, write_trace, TraceFile, TraceRecorder, TraceReplay};

use std::sync::Arc;

use crate::dist::{Distribution, TokenId, Vocab};
use crate::error::Result;

/// A next-token model over a shared vocabulary.
///
/// Implementations must return the same distribution whenever they are given
/// the same prefix, with the exception of [`TraceReplay`], which replays
/// recorded rows in call order.
pub trait ModelProvider: Send + Sync {
    fn vocab(&self) -> Vocab;

    fn next_distribution(&self, prefix: &[TokenId]) -> Result<Distribution>;
}

impl<T: ModelProvider + ?Sized> ModelProvider for Box<T> {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> Result<Distribution> {
        (**self).next_distribution(prefix)
    }
}

impl<T: ModelProvider + ?Sized> ModelProvider for Arc<T> {
    fn vocab(&self) -> Vocab {
        (**self).vocab()
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> Result<Distribution> {
        (**self).next_distribution(prefix)
    }
}

const HASH_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const HASH_MULTIPLIER: u64 = 0x0000_0100_0000_01b3;

/// Polynomial rolling hash of a token sequence:
/// `h = h * 0x100000001b3 + (token + 1)` (wrapping), starting from
/// `0xcbf29ce484222325`.
pub fn prefix_hash(tokens: &[TokenId]) -> u64 {
    tokens.iter().fold(HASH_OFFSET, |h, t| {
        h.wrapping_mul(HASH_MULTIPLIER)
            .wrapping_add(u64::from(t.0) + 1)
    })
}

/// Always returns the same distribution.
#[derive(Debug, Clone)]
pub struct FixedModel {
    dist: Distribution,
    vocab: Vocab,
}

impl FixedModel {
    pub fn new(dist: Distribution) -> Result<Self> {
        let vocab = Vocab::new(dist.len())?;
        Ok(Self { dist, vocab })
    }
}

impl ModelProvider for FixedModel {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn next_distribution(&self, _prefix: &[TokenId]) -> Result<Distribution> {
        Ok(self.dist.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_hash_is_stable() {
        assert_eq!(prefix_hash(&[]), HASH_OFFSET);
        let a = prefix_hash(&[TokenId(1), TokenId(2)]);
        assert_eq!(a, prefix_hash(&[TokenId(1), TokenId(2)]));
        assert_ne!(a, prefix_hash(&[TokenId(2), TokenId(1)]));
        assert_ne!(prefix_hash(&[TokenId(0)]), prefix_hash(&[]));
        // pinned so that runs reproduce across builds and platforms
        let expected = HASH_OFFSET
            .wrapping_mul(HASH_MULTIPLIER)
            .wrapping_add(2)
            .wrapping_mul(HASH_MULTIPLIER)
            .wrapping_add(3);
        assert_eq!(a, expected);
    }
}
