use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use super::{prefix_hash, ModelProvider};
use crate::dist::{derive_seed, softmax_with_temperature, Distribution, Logits, TokenId, Vocab};
use crate::error::{Error, Result};

/// Parameters of a seeded random-logit model.
///
/// Logits are `concentration * (sqrt(c) * z_shared + sqrt(1 - c) * z_own)`,
/// where `c` is `correlation`, `z_own` is keyed by `(seed, prefix)` and
/// `z_shared` by `(shared_seed, prefix)`. Models that share a `shared_seed`
/// agree more as `c` grows; with `c = 0` only `seed` matters.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModelSpec {
    pub seed: u64,
    pub vocab: Vocab,
    pub concentration: f64,
    pub temperature: f64,
    pub correlation: f64,
    pub shared_seed: u64,
}

impl SyntheticModelSpec {
    pub fn new(seed: u64, vocab: Vocab, concentration: f64, temperature: f64) -> Self {
        Self {
            seed,
            vocab,
            concentration,
            temperature,
            correlation: 0.0,
            shared_seed: 0,
        }
    }

    pub fn with_correlation(mut self, shared_seed: u64, correlation: f64) -> Self {
        self.shared_seed = shared_seed;
        self.correlation = correlation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.concentration.is_finite() && self.concentration >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "concentration must be finite and non-negative, got {}",
                self.concentration
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::InvalidParameter(format!(
                "correlation must lie in [0, 1], got {}",
                self.correlation
            )));
        }
        Ok(())
    }
}

fn normals(seed: u64, hash: u64, n: usize) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, hash));
    (0..n).map(move |_| StandardNormal.sample(&mut rng))
}

pub fn synthetic_logits(spec: &SyntheticModelSpec, prefix: &[TokenId]) -> Logits {
    let n = spec.vocab.size();
    let hash = prefix_hash(prefix);
    let own_scale = (1.0 - spec.correlation).sqrt();
    let shared_scale = spec.correlation.sqrt();
    let mut values: Vec<f64> = normals(spec.seed, hash, n)
        .map(|z| spec.concentration * own_scale * z)
        .collect();
    if spec.correlation > 0.0 {
        for (v, z) in values.iter_mut().zip(normals(spec.shared_seed, hash, n)) {
            *v += spec.concentration * shared_scale * z;
        }
    }
    Logits::new(values).expect("normal variates are finite")
}

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    spec: SyntheticModelSpec,
}

impl SyntheticModel {
    pub fn new(spec: SyntheticModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SyntheticModelSpec {
        &self.spec
    }
}

impl ModelProvider for SyntheticModel {
    fn vocab(&self) -> Vocab {
        self.spec.vocab
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> Result<Distribution> {
        softmax_with_temperature(&synthetic_logits(&self.spec, prefix), self.spec.temperature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SyntheticModelSpec {
        SyntheticModelSpec::new(seed, Vocab::new(16).unwrap(), 2.0, 1.0)
    }

    #[test]
    fn deterministic_per_prefix() {
        let prefix = [TokenId(3), TokenId(1)];
        assert_eq!(synthetic_logits(&spec(9), &prefix), synthetic_logits(&spec(9), &prefix));
        assert_ne!(synthetic_logits(&spec(9), &prefix), synthetic_logits(&spec(9), &prefix[..1]));
    }

    #[test]
    fn seeds_give_distinct_logits() {
        let prefix = [TokenId(0)];
        let all: Vec<_> = (0..100).map(|s| synthetic_logits(&spec(s), &prefix)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn zero_concentration_is_uniform() {
        let mut s = spec(1);
        s.concentration = 0.0;
        let m = SyntheticModel::new(s).unwrap();
        let d = m.next_distribution(&[TokenId(2)]).unwrap();
        assert!(d.probs().iter().all(|p| *p == 1.0 / 16.0));
    }

    #[test]
    fn full_correlation_ignores_own_seed() {
        let a = SyntheticModel::new(spec(1).with_correlation(77, 1.0)).unwrap();
        let b = SyntheticModel::new(spec(2).with_correlation(77, 1.0)).unwrap();
        let p = [TokenId(5)];
        assert_eq!(a.next_distribution(&p).unwrap(), b.next_distribution(&p).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(1);
        s.temperature = 0.0;
        assert!(SyntheticModel::new(s).is_err());
        assert!(SyntheticModel::new(spec(1).with_correlation(0, 1.5)).is_err());
    }
}
