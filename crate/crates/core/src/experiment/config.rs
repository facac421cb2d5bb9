//! Run configuration: flat `key = value` text, every key also settable one
//! at a time (the CLI maps `--key value` flags onto [`RunConfig::set`]).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::aggregation::{TopKProfile, WeightVector};
use crate::compression::Strategy;
use crate::dist::{TokenId, Vocab};
use crate::engine::DecodeConfig;
use crate::error::{Error, Result};

/// How workers are reached and whether exact shadows are collected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    InProcess,
    Networked,
    Instrumented,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::InProcess => "in-process",
            Mode::Networked => "networked",
            Mode::Instrumented => "instrumented",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-process" => Ok(Mode::InProcess),
            "networked" => Ok(Mode::Networked),
            "instrumented" => Ok(Mode::Instrumented),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected in-process, networked or instrumented)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provider {
    Synthetic,
    Markov,
}

impl FromStr for Provider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Provider::Synthetic),
            "markov" => Ok(Provider::Markov),
            _ => Err(Error::Config(format!("unknown provider {s:?} (expected synthetic or markov)"))),
        }
    }
}

/// Per-worker top-K setting as written in the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KSetting {
    /// Every worker sends the whole vocabulary.
    Full,
    /// One value for all workers, or one per worker.
    Values(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub vocab_size: usize,
    pub workers: usize,
    /// Empty means uniform.
    pub weights: Vec<f64>,
    pub gamma: usize,
    pub k: KSetting,
    pub strategy: Strategy,
    pub temperature: f64,
    pub provider: Provider,
    pub concentration: f64,
    pub correlation: f64,
    pub corpus: Option<PathBuf>,
    pub markov_order: usize,
    pub smoothing: f64,
    pub model_seed: u64,
    pub seed: u64,
    pub max_tokens: usize,
    pub samples: usize,
    pub mode: Mode,
    pub prompt: Vec<TokenId>,
    pub eos: Option<TokenId>,
    pub endpoints: Vec<String>,
    pub timeout_ms: u64,
    /// K values visited by a sweep.
    pub k_values: Vec<usize>,
    /// Temperatures visited by a sweep.
    pub temperatures: Vec<f64>,
}

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "vocab_size",
    "workers",
    "weights",
    "gamma",
    "k",
    "strategy",
    "temperature",
    "provider",
    "concentration",
    "correlation",
    "corpus",
    "markov_order",
    "smoothing",
    "model_seed",
    "seed",
    "max_tokens",
    "samples",
    "mode",
    "prompt",
    "eos",
    "endpoints",
    "timeout_ms",
    "k_values",
    "temperatures",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            workers: 2,
            weights: Vec::new(),
            gamma: 4,
            k: KSetting::Values(vec![8]),
            strategy: Strategy::Renormalized,
            temperature: 1.0,
            provider: Provider::Synthetic,
            concentration: 3.0,
            correlation: 0.8,
            corpus: None,
            markov_order: 2,
            smoothing: 0.1,
            model_seed: 7,
            seed: 42,
            max_tokens: 64,
            samples: 20,
            mode: Mode::Instrumented,
            prompt: vec![TokenId(0)],
            eos: None,
            endpoints: Vec::new(),
            timeout_ms: 5000,
            k_values: vec![1, 8, 64, 512],
            temperatures: vec![0.8, 1.0, 1.2],
        }
    }
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| scalar(key, v.trim())).collect()
}

impl RunConfig {
    /// Defaults overridden by the `key = value` lines of `text`. Blank lines
    /// and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "vocab_size" => self.vocab_size = scalar(key, value)?,
            "workers" => self.workers = scalar(key, value)?,
            "weights" => self.weights = list(key, value)?,
            "gamma" => self.gamma = scalar(key, value)?,
            "k" => {
                self.k = if value == "full" {
                    KSetting::Full
                } else {
                    KSetting::Values(list(key, value)?)
                }
            }
            "strategy" => self.strategy = scalar(key, value)?,
            "temperature" => self.temperature = scalar(key, value)?,
            "provider" => self.provider = scalar(key, value)?,
            "concentration" => self.concentration = scalar(key, value)?,
            "correlation" => self.correlation = scalar(key, value)?,
            "corpus" => self.corpus = (!value.is_empty()).then(|| PathBuf::from(value)),
            "markov_order" => self.markov_order = scalar(key, value)?,
            "smoothing" => self.smoothing = scalar(key, value)?,
            "model_seed" => self.model_seed = scalar(key, value)?,
            "seed" => self.seed = scalar(key, value)?,
            "max_tokens" => self.max_tokens = scalar(key, value)?,
            "samples" => self.samples = scalar(key, value)?,
            "mode" => self.mode = scalar(key, value)?,
            "prompt" => self.prompt = list::<u32>(key, value)?.into_iter().map(TokenId).collect(),
            "eos" => {
                self.eos = match value {
                    "" | "none" => None,
                    v => Some(TokenId(scalar(key, v)?)),
                }
            }
            "endpoints" => self.endpoints = list(key, value)?,
            "timeout_ms" => self.timeout_ms = scalar(key, value)?,
            "k_values" => self.k_values = list(key, value)?,
            "temperatures" => self.temperatures = list(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn weight_vector(&self) -> Result<WeightVector> {
        let w = if self.weights.is_empty() {
            WeightVector::uniform(self.workers)
        } else {
            WeightVector::new(self.weights.clone())
        };
        w.map_err(|e| Error::Config(format!("weights: {e}")))
    }

    /// The per-worker k values.
    pub fn ks(&self) -> Result<Vec<usize>> {
        match &self.k {
            KSetting::Full => Ok(vec![self.vocab_size; self.workers]),
            KSetting::Values(v) if v.len() == 1 => Ok(vec![v[0]; self.workers]),
            KSetting::Values(v) if v.len() == self.workers => Ok(v.clone()),
            KSetting::Values(v) => Err(Error::Config(format!(
                "k has {} values for {} workers",
                v.len(),
                self.workers
            ))),
        }
    }

    pub fn profile(&self) -> Result<TopKProfile> {
        TopKProfile::new(self.ks()?, self.vocab()?).map_err(|e| Error::Config(format!("k: {e}")))
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn decode_config(&self) -> Result<DecodeConfig> {
        Ok(DecodeConfig {
            gamma: self.gamma,
            weights: self.weight_vector()?,
            profile: self.profile()?,
            strategy: self.strategy,
            eos: self.eos,
            instrumented: self.mode == Mode::Instrumented,
        })
    }

    /// Checks everything a run depends on, so failures surface before any
    /// decoding starts.
    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.gamma == 0 {
            return bad("gamma must be at least 1".into());
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1".into());
        }
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        self.weight_vector()?;
        self.profile()?;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.concentration.is_finite() && self.concentration >= 0.0) {
            return bad(format!("concentration must be non-negative, got {}", self.concentration));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return bad(format!("correlation must lie in [0, 1], got {}", self.correlation));
        }
        if self.prompt.is_empty() {
            return bad("prompt must hold at least one token".into());
        }
        for &t in self.prompt.iter().chain(self.eos.iter()) {
            if !vocab.contains(t) {
                return bad(format!("token {t} outside vocabulary of size {}", self.vocab_size));
            }
        }
        if self.provider == Provider::Markov {
            if self.corpus.is_none() {
                return bad("the markov provider needs a corpus file".into());
            }
            if self.markov_order == 0 {
                return bad("markov_order must be at least 1".into());
            }
            if !(self.smoothing.is_finite() && self.smoothing > 0.0) {
                return bad(format!("smoothing must be positive, got {}", self.smoothing));
            }
        }
        if self.mode == Mode::Networked && self.endpoints.len() != self.workers {
            return bad(format!(
                "networked mode needs one endpoint per worker ({} given, {} workers)",
                self.endpoints.len(),
                self.workers
            ));
        }
        if self.timeout_ms == 0 {
            return bad("timeout_ms must be positive".into());
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the sweep lists.
    pub fn validate_sweep(&self) -> Result<()> {
        self.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k_values.is_empty() || self.temperatures.is_empty() {
            return bad("a sweep needs at least one k value and one temperature".into());
        }
        if let Some(&k) = self.k_values.iter().find(|&&k| k == 0 || k > self.vocab_size) {
            return bad(format!("k_values entry {k} outside 1..={}", self.vocab_size));
        }
        if let Some(t) = self.temperatures.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return bad(format!("temperatures entry {t} is not positive"));
        }
        Ok(())
    }
}
