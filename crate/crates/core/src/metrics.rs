//! Reconstruction error, aggregation bias and acceptance-rate variation, the
//! bounds that relate them to the residual mass, and the sweep averages.
//!
//! For one verification position with exact worker distributions `p_i`,
//! reconstructions `p_i^(k)` and draft distribution `q`:
//!
//! * local error `Δ_i = ‖p_i^(k) − p_i‖₁`, equal to `2ε_i` for the
//!   renormalized reconstruction and at most `2ε_i` for residual-uniform;
//! * aggregation bias `Δ = ‖p̄^(k) − p̄‖₁ ≤ 2 Σ w_i ε_i`;
//! * acceptance variation `Δα = |α^(k) − α| ≤ Δ/2 ≤ Σ w_i ε_i`.

use crate::aggregation::{aggregate, TopKProfile, WeightVector};
use crate::compression::{mass_split, truncate_topk, Strategy, TopKPayload};
use crate::decode::acceptance_rate;
use crate::dist::{l1_distance, Distribution};
use crate::error::{Error, Result};

/// Tolerance for bound checks on 64-bit reconstructions.
pub const EXACT_BOUND_TOLERANCE: f64 = 1e-9;
/// Tolerance for bound checks on reconstructions of 32-bit wire payloads.
pub const WIRE_BOUND_TOLERANCE: f64 = 1e-5;

/// One value per reconstruction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PerStrategy<T> {
    pub renormalized: T,
    pub residual_uniform: T,
}

impl<T> PerStrategy<T> {
    pub fn get(&self, s: Strategy) -> &T {
        match s {
            Strategy::Renormalized => &self.renormalized,
            Strategy::ResidualUniform => &self.residual_uniform,
        }
    }

    pub fn try_from_fn<F: FnMut(Strategy) -> Result<T>>(mut f: F) -> Result<Self> {
        Ok(Self {
            renormalized: f(Strategy::Renormalized)?,
            residual_uniform: f(Strategy::ResidualUniform)?,
        })
    }
}

pub fn local_error(original: &Distribution, reconstructed: &Distribution) -> Result<f64> {
    l1_distance(reconstructed, original)
}

pub fn aggregation_bias(exact: &Distribution, compressed: &Distribution) -> Result<f64> {
    l1_distance(compressed, exact)
}

pub fn acceptance_variation(
    q: &Distribution,
    p_exact: &Distribution,
    p_comp: &Distribution,
) -> Result<f64> {
    Ok((acceptance_rate(p_comp, q)? - acceptance_rate(p_exact, q)?).abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerStepMetrics {
    pub epsilon: f64,
    pub local_error: PerStrategy<f64>,
}

/// Everything measured at one verification position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub workers: Vec<WorkerStepMetrics>,
    /// Σ_i w_i ε_i.
    pub weighted_epsilon: f64,
    pub aggregation_bias: PerStrategy<f64>,
    pub alpha_exact: f64,
    pub alpha_compressed: PerStrategy<f64>,
    pub acceptance_variation: PerStrategy<f64>,
}

impl StepMetrics {
    /// Truncates each exact distribution to its worker's `k` and measures.
    pub fn compute(
        q: &Distribution,
        exact: &[Distribution],
        profile: &TopKProfile,
        weights: &WeightVector,
    ) -> Result<Self> {
        if exact.len() != profile.len() {
            return Err(Error::DimensionMismatch {
                left: exact.len(),
                right: profile.len(),
            });
        }
        let payloads = exact
            .iter()
            .zip(profile.as_slice())
            .map(|(d, &k)| truncate_topk(d, k))
            .collect::<Result<Vec<_>>>()?;
        Self::from_payloads(q, exact, &payloads, weights)
    }

    /// Measures given payloads against the exact distributions they came from.
    pub fn from_payloads(
        q: &Distribution,
        exact: &[Distribution],
        payloads: &[TopKPayload],
        weights: &WeightVector,
    ) -> Result<Self> {
        if exact.len() != payloads.len() {
            return Err(Error::DimensionMismatch {
                left: exact.len(),
                right: payloads.len(),
            });
        }
        let reconstructions = PerStrategy::try_from_fn(|s| {
            payloads.iter().map(|p| s.reconstruct(p)).collect::<Result<Vec<_>>>()
        })?;
        let workers = exact
            .iter()
            .zip(payloads)
            .enumerate()
            .map(|(i, (d, p))| {
                Ok(WorkerStepMetrics {
                    epsilon: mass_split(p).epsilon,
                    local_error: PerStrategy::try_from_fn(|s| {
                        local_error(d, &reconstructions.get(s)[i])
                    })?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let weighted_epsilon = workers
            .iter()
            .zip(weights.as_slice())
            .map(|(w, wi)| wi * w.epsilon)
            .sum();
        let p_exact = aggregate(exact, weights)?;
        let p_comp = PerStrategy::try_from_fn(|s| aggregate(reconstructions.get(s), weights))?;
        let alpha_exact = acceptance_rate(&p_exact, q)?;
        let alpha_compressed = PerStrategy::try_from_fn(|s| acceptance_rate(p_comp.get(s), q))?;
        Ok(Self {
            workers,
            weighted_epsilon,
            aggregation_bias: PerStrategy::try_from_fn(|s| {
                aggregation_bias(&p_exact, p_comp.get(s))
            })?,
            alpha_exact,
            acceptance_variation: PerStrategy {
                renormalized: (alpha_compressed.renormalized - alpha_exact).abs(),
                residual_uniform: (alpha_compressed.residual_uniform - alpha_exact).abs(),
            },
            alpha_compressed,
        })
    }
}

/// Which bounds held at one step for one strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundCheck {
    /// Per-worker local error against `2ε` (equality for renormalized).
    pub local_error: bool,
    /// `Δ ≤ 2 Σ w_i ε_i`.
    pub bias: bool,
    /// `Δα ≤ Δ/2 ≤ Σ w_i ε_i`.
    pub variation: bool,
}

impl BoundCheck {
    pub fn all_hold(&self) -> bool {
        self.local_error && self.bias && self.variation
    }
}

pub fn check_bounds(step: &StepMetrics, strategy: Strategy, tolerance: f64) -> BoundCheck {
    let local_error = step.workers.iter().all(|w| {
        let err = *w.local_error.get(strategy);
        match strategy {
            Strategy::Renormalized => (err - 2.0 * w.epsilon).abs() <= tolerance,
            Strategy::ResidualUniform => err <= 2.0 * w.epsilon + tolerance,
        }
    });
    let delta = *step.aggregation_bias.get(strategy);
    let bias = delta <= 2.0 * step.weighted_epsilon + tolerance;
    let dalpha = *step.acceptance_variation.get(strategy);
    let variation = dalpha <= delta / 2.0 + tolerance && delta / 2.0 <= step.weighted_epsilon + tolerance;
    BoundCheck { local_error, bias, variation }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ViolationCounts {
    pub local_error: usize,
    pub bias: usize,
    pub variation: usize,
}

impl ViolationCounts {
    pub fn record(&mut self, check: BoundCheck) {
        self.local_error += usize::from(!check.local_error);
        self.bias += usize::from(!check.bias);
        self.variation += usize::from(!check.variation);
    }

    pub fn total(&self) -> usize {
        self.local_error + self.bias + self.variation
    }
}

/// Configuration echoed into each CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEcho {
    pub strategy: Strategy,
    pub workers: usize,
    pub gamma: usize,
    pub vocab_size: usize,
    pub profile: Vec<usize>,
    pub temperature: f64,
    pub seed: u64,
    pub samples: usize,
}

impl SweepEcho {
    /// The `K` column: the shared k, or `k1;k2;...` for mixed profiles.
    pub fn k_label(&self) -> String {
        match self.profile.split_first() {
            Some((first, rest)) if rest.iter().all(|k| k == first) => first.to_string(),
            _ => self
                .profile
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        }
    }

    pub fn k_pct(&self) -> f64 {
        let mean = self.profile.iter().sum::<usize>() as f64 / self.profile.len().max(1) as f64;
        100.0 * mean / self.vocab_size as f64
    }
}

/// Step averages for one configuration point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub echo: SweepEcho,
    pub steps: usize,
    pub delta_bar: f64,
    pub eps_bar: f64,
    pub delta_alpha_bar: f64,
    pub violations: ViolationCounts,
    /// Smallest and largest per-step Δ, kept for auditing the averages.
    pub delta_range: (f64, f64),
}

pub const CSV_HEADER: &str = "strategy,M,gamma,vocab_size,K,K_pct,temperature,seed,samples,steps,\
delta_bar,eps_bar,two_eps_bar,delta_alpha_bar,half_delta_bar,lemma1_violations,thm1_violations,thm2_violations";

impl SweepRecord {
    pub fn two_eps_bar(&self) -> f64 {
        2.0 * self.eps_bar
    }

    pub fn half_delta_bar(&self) -> f64 {
        self.delta_bar / 2.0
    }

    pub fn csv_row(&self) -> String {
        let e = &self.echo;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            e.strategy,
            e.workers,
            e.gamma,
            e.vocab_size,
            e.k_label(),
            e.k_pct(),
            e.temperature,
            e.seed,
            e.samples,
            self.steps,
            self.delta_bar,
            self.eps_bar,
            self.two_eps_bar(),
            self.delta_alpha_bar,
            self.half_delta_bar(),
            self.violations.local_error,
            self.violations.bias,
            self.violations.variation,
        )
    }
}

pub fn write_csv(records: &[SweepRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Means of Δ, Σ w_i ε_i and Δα over `steps`, summed in order, plus the
/// bound-violation counts at `tolerance`.
pub fn sweep_aggregate(steps: &[StepMetrics], echo: SweepEcho, tolerance: f64) -> Result<SweepRecord> {
    if steps.is_empty() {
        return Err(Error::InvalidParameter("no steps to aggregate".into()));
    }
    let s = echo.strategy;
    let n = steps.len() as f64;
    let mut violations = ViolationCounts::default();
    let (mut delta, mut eps, mut dalpha) = (0.0, 0.0, 0.0);
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    for step in steps {
        let bias = *step.aggregation_bias.get(s);
        delta += bias;
        eps += step.weighted_epsilon;
        dalpha += *step.acceptance_variation.get(s);
        range = (range.0.min(bias), range.1.max(bias));
        violations.record(check_bounds(step, s, tolerance));
    }
    Ok(SweepRecord {
        echo,
        steps: steps.len(),
        delta_bar: delta / n,
        eps_bar: eps / n,
        delta_alpha_bar: dalpha / n,
        violations,
        delta_range: range,
    })
}
