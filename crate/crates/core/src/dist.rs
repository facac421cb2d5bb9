//! Probability vectors over a shared vocabulary and the numerical primitives
//! every other module builds on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Absolute tolerance on the sum of a distribution built from exact (64-bit)
/// arithmetic.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Absolute tolerance on the sum of a distribution that crossed the wire at
/// 32-bit precision.
pub const WIRE_TOLERANCE: f64 = 1e-5;

// Sums closer to 1 than this are left untouched, so values that were already
// normalized keep their exact bits when they pass through a constructor again.
const RENORMALIZE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocab(usize);

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidParameter(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        if size > u32::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "vocabulary size {size} does not fit in 32 bits"
            )));
        }
        Ok(Self(size))
    }

    pub fn size(self) -> usize {
        self.0
    }

    pub fn contains(self, token: TokenId) -> bool {
        token.index() < self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Unnormalized scores over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("logits are empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("logit {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A categorical distribution stored densely in token-id order.
///
/// Every entry is non-negative and the entries sum to one. Construction
/// accepts vectors whose sum is within the given tolerance of one and divides
/// by the sum once when it is off by more than rounding noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, SUM_TOLERANCE)
    }

    pub fn with_tolerance(mut probs: Vec<f64>, tolerance: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::InvalidDistribution(format!("entry {i} is not finite")));
            }
            if p < 0.0 {
                return Err(Error::InvalidDistribution(format!("entry {i} is negative ({p})")));
            }
        }
        let sum: f64 = probs.iter().sum();
        let deviation = (sum - 1.0).abs();
        if deviation > tolerance {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, outside tolerance {tolerance}"
            )));
        }
        if deviation > RENORMALIZE_SLACK {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Self { probs })
    }

    pub fn uniform(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        Ok(Self {
            probs: vec![1.0 / size as f64; size],
        })
    }

    pub fn point_mass(size: usize, token: TokenId) -> Result<Self> {
        if token.index() >= size {
            return Err(Error::InvalidParameter(format!(
                "token {token} out of range for size {size}"
            )));
        }
        let mut probs = vec![0.0; size];
        probs[token.index()] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs.get(token.index()).copied().unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

fn check_same_len(a: &Distribution, b: &Distribution) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

/// Softmax of `logits / temperature`, shifted by the maximum logit so the
/// exponentials never overflow.
pub fn softmax_with_temperature(logits: &Logits, temperature: f64) -> Result<Distribution> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let values = logits.values();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = values
        .iter()
        .map(|&l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    Distribution::new(probs)
}

pub fn l1_distance(a: &Distribution, b: &Distribution) -> Result<f64> {
    check_same_len(a, b)?;
    Ok(a.probs
        .iter()
        .zip(&b.probs)
        .map(|(x, y)| (x - y).abs())
        .sum())
}

/// Total variation distance, half the L1 distance.
pub fn tv_distance(a: &Distribution, b: &Distribution) -> Result<f64> {
    Ok(l1_distance(a, b)? / 2.0)
}

/// Σ_x min(a(x), b(x)).
pub fn overlap(a: &Distribution, b: &Distribution) -> Result<f64> {
    check_same_len(a, b)?;
    Ok(a.probs.iter().zip(&b.probs).map(|(x, y)| x.min(*y)).sum())
}

/// Inverse-CDF sampling with an ascending token-id scan.
///
/// `u` is expected in `[0, 1)`. If rounding leaves `u` above the final
/// cumulative sum, the last token with positive probability is returned.
pub fn sample(d: &Distribution, u: f64) -> TokenId {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in d.probs.iter().enumerate() {
        if p > 0.0 {
            cumulative += p;
            last_positive = i;
            if u < cumulative {
                return TokenId(i as u32);
            }
        }
    }
    TokenId(last_positive as u32)
}

/// A source of uniform draws in `[0, 1)`.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

impl<T: UniformSource + ?Sized> UniformSource for &mut T {
    fn next_uniform(&mut self) -> f64 {
        (**self).next_uniform()
    }
}

pub fn sample_from(d: &Distribution, rng: &mut dyn UniformSource) -> TokenId {
    sample(d, rng.next_uniform())
}

/// Seeded ChaCha8 stream.
#[derive(Debug, Clone)]
pub struct SeededStream(ChaCha8Rng);

impl SeededStream {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }
}

impl UniformSource for SeededStream {
    fn next_uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }
}

/// Replays a fixed list of uniforms; panics when exhausted.
#[derive(Debug, Clone, Default)]
pub struct ScriptedUniforms {
    values: Vec<f64>,
    pos: usize,
}

impl ScriptedUniforms {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, pos: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.pos
    }
}

impl UniformSource for ScriptedUniforms {
    fn next_uniform(&mut self) -> f64 {
        let v = self.values[self.pos];
        self.pos += 1;
        v
    }
}

/// SplitMix64 finalizer applied to `base + stream * golden`. Used to derive
/// independent stream seeds from one experiment seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
