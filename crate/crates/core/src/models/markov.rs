use std::collections::HashMap;

use super::ModelProvider;
use crate::dist::{Distribution, TokenId, Vocab};
use crate::error::{Error, Result};

/// Order-n token model with add-λ smoothing, trained from a corpus.
///
/// Contexts never seen during training, including prefixes shorter than the
/// order, fall back to the uniform distribution.
#[derive(Debug, Clone)]
pub struct MarkovModel {
    order: usize,
    vocab: Vocab,
    smoothing: f64,
    counts: HashMap<Vec<TokenId>, Vec<u64>>,
}

impl MarkovModel {
    pub fn train(corpus: &[TokenId], order: usize, vocab: Vocab, smoothing: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("markov order must be positive".into()));
        }
        if !(smoothing.is_finite() && smoothing > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "smoothing must be positive, got {smoothing}"
            )));
        }
        if let Some(t) = corpus.iter().find(|t| !vocab.contains(**t)) {
            return Err(Error::InvalidParameter(format!(
                "corpus token {t} outside vocabulary of size {}",
                vocab.size()
            )));
        }
        let mut counts: HashMap<Vec<TokenId>, Vec<u64>> = HashMap::new();
        for window in corpus.windows(order + 1) {
            let (context, next) = window.split_at(order);
            counts
                .entry(context.to_vec())
                .or_insert_with(|| vec![0; vocab.size()])[next[0].index()] += 1;
        }
        Ok(Self {
            order,
            vocab,
            smoothing,
            counts,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

/// Smoothed conditional distribution given the last `order` tokens.
pub fn markov_next(model: &MarkovModel, prefix: &[TokenId]) -> Distribution {
    let n = model.vocab.size();
    let uniform = || Distribution::uniform(n).expect("vocab is non-empty");
    if prefix.len() < model.order {
        return uniform();
    }
    let context = &prefix[prefix.len() - model.order..];
    let Some(row) = model.counts.get(context) else {
        return uniform();
    };
    let total: u64 = row.iter().sum();
    let denom = total as f64 + model.smoothing * n as f64;
    let probs = row
        .iter()
        .map(|&c| (c as f64 + model.smoothing) / denom)
        .collect();
    Distribution::new(probs).expect("smoothed counts form a distribution")
}

impl ModelProvider for MarkovModel {
    fn vocab(&self) -> Vocab {
        self.vocab
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> Result<Distribution> {
        Ok(markov_next(self, prefix))
    }
}

/// Whitespace-separated non-negative integer tokens.
pub fn parse_corpus(text: &str) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|w| {
            w.parse::<u32>()
                .map(TokenId)
                .map_err(|_| Error::InvalidParameter(format!("bad corpus token {w:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(v: &[u32]) -> Vec<TokenId> {
        v.iter().map(|&t| TokenId(t)).collect()
    }

    #[test]
    fn bigram_counts_dominate_with_small_smoothing() {
        let vocab = Vocab::new(2).unwrap();
        let m = MarkovModel::train(&toks(&[0, 1, 0, 1, 0, 1]), 1, vocab, 1e-9).unwrap();
        let d = markov_next(&m, &toks(&[0]));
        assert!(d.probs()[1] > 1.0 - 1e-8);
        let d = markov_next(&m, &toks(&[1]));
        assert!(d.probs()[0] > 1.0 - 1e-8);
    }

    #[test]
    fn unseen_context_backs_off_to_uniform() {
        let vocab = Vocab::new(4).unwrap();
        let m = MarkovModel::train(&toks(&[0, 1, 0, 1]), 1, vocab, 0.5).unwrap();
        assert_eq!(markov_next(&m, &toks(&[3])).probs(), &[0.25; 4]);
        assert_eq!(markov_next(&m, &[]).probs(), &[0.25; 4]);
    }

    #[test]
    fn add_lambda_formula() {
        let vocab = Vocab::new(2).unwrap();
        for lambda in [0.1, 0.5, 1.0, 3.0] {
            // context [1] is followed once by token 0
            let m = MarkovModel::train(&toks(&[1, 0]), 1, vocab, lambda).unwrap();
            let d = markov_next(&m, &toks(&[1]));
            let denom = 1.0 + 2.0 * lambda;
            assert!((d.probs()[0] - (1.0 + lambda) / denom).abs() < 1e-15);
            assert!((d.probs()[1] - lambda / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn higher_order_contexts() {
        let vocab = Vocab::new(3).unwrap();
        let m = MarkovModel::train(&toks(&[0, 1, 2, 0, 1, 2, 0, 1, 2]), 2, vocab, 1e-9).unwrap();
        let d = markov_next(&m, &toks(&[2, 0, 1]));
        assert!(d.probs()[2] > 1.0 - 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        let vocab = Vocab::new(2).unwrap();
        assert!(MarkovModel::train(&toks(&[0, 5]), 1, vocab, 1.0).is_err());
        assert!(MarkovModel::train(&toks(&[0, 1]), 0, vocab, 1.0).is_err());
        assert!(MarkovModel::train(&toks(&[0, 1]), 1, vocab, 0.0).is_err());
        assert!(parse_corpus("1 2 x").is_err());
        assert_eq!(parse_corpus(" 1\n2\t3 ").unwrap(), toks(&[1, 2, 3]));
    }
}
