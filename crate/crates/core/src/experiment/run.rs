//! Single runs, K/temperature sweeps and trace record/rescore.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{Mode, Provider, RunConfig};
use crate::aggregation::{TopKProfile, WeightVector};
use crate::compression::Strategy;
use crate::dist::{derive_seed, TokenId, Vocab};
use crate::engine::{generate, Generation, LocalWorkers, StepCapture, UplinkMode, WorkerPool};
use crate::error::{Error, Result};
use crate::metrics::{sweep_aggregate, StepMetrics, SweepEcho, SweepRecord, EXACT_BOUND_TOLERANCE};
use crate::models::{
    parse_corpus, read_trace, write_trace, MarkovModel, ModelProvider, SyntheticModel, SyntheticModelSpec,
    TraceFile, TraceReplay,
};
use crate::transport::{Configure, RemoteWorkers, WorkerSetup};

fn read_corpus(config: &RunConfig) -> Result<Vec<TokenId>> {
    let path = config
        .corpus
        .as_ref()
        .ok_or_else(|| Error::Config("the markov provider needs a corpus file".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("corpus {}: {e}", path.display())))?;
    parse_corpus(&text)
}

fn synthetic(config: &RunConfig, seed: u64) -> Result<Box<dyn ModelProvider>> {
    let spec = SyntheticModelSpec::new(seed, config.vocab()?, config.concentration, config.temperature)
        .with_correlation(derive_seed(config.model_seed, u64::MAX), config.correlation);
    Ok(Box::new(SyntheticModel::new(spec)?))
}

/// The draft model. Synthetic drafts share the workers' common component,
/// so `correlation` also sets how well the draft matches them.
pub fn draft_model(config: &RunConfig) -> Result<Box<dyn ModelProvider>> {
    match config.provider {
        Provider::Synthetic => synthetic(config, config.model_seed),
        Provider::Markov => Ok(Box::new(MarkovModel::train(
            &read_corpus(config)?,
            1,
            config.vocab()?,
            config.smoothing,
        )?)),
    }
}

/// The model hosted by worker `index`.
///
/// Markov workers all use `markov_order`; worker `i` smooths with
/// `smoothing * (i + 1)` so that workers disagree.
pub fn worker_model(config: &RunConfig, index: usize) -> Result<Box<dyn ModelProvider>> {
    match config.provider {
        Provider::Synthetic => synthetic(config, config.model_seed.wrapping_add(1 + index as u64)),
        Provider::Markov => Ok(Box::new(MarkovModel::train(
            &read_corpus(config)?,
            config.markov_order,
            config.vocab()?,
            config.smoothing * (index + 1) as f64,
        )?)),
    }
}

fn worker_models(config: &RunConfig) -> Result<Vec<Box<dyn ModelProvider>>> {
    (0..config.workers).map(|i| worker_model(config, i)).collect()
}

/// Model factory for a worker process: CONFIGURE carries the worker index
/// as seed material, everything else comes from `config`.
pub fn worker_factory(config: RunConfig) -> impl Fn(&Configure) -> Result<Box<dyn ModelProvider>> {
    move |c: &Configure| {
        if c.vocab_size as usize != config.vocab_size {
            return Err(Error::Config(format!(
                "server vocabulary {} differs from worker vocabulary {}",
                c.vocab_size, config.vocab_size
            )));
        }
        worker_model(&config, c.seed_material as usize)
    }
}

pub fn worker_setups(config: &RunConfig) -> Result<Vec<WorkerSetup>> {
    let ks = config.ks()?;
    let weights = config.weight_vector()?;
    Ok(config
        .endpoints
        .iter()
        .zip(ks)
        .zip(weights.as_slice())
        .enumerate()
        .map(|(i, ((endpoint, k), &weight))| WorkerSetup {
            endpoint: endpoint.clone(),
            k,
            weight,
            seed_material: i as u64,
        })
        .collect())
}

pub fn connect_workers(config: &RunConfig) -> Result<RemoteWorkers> {
    RemoteWorkers::connect(
        &worker_setups(config)?,
        config.vocab_size,
        config.gamma,
        config.strategy,
        config.timeout(),
    )
}

/// In-process workers sending top-K payloads, with exact shadows in
/// instrumented mode.
pub fn local_workers(config: &RunConfig) -> Result<LocalWorkers> {
    Ok(LocalWorkers::new(worker_models(config)?, &config.profile()?)?
        .with_shadows(config.mode == Mode::Instrumented))
}

/// Seed of sample `index`.
pub fn sample_seed(config: &RunConfig, index: usize) -> u64 {
    config.seed.wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleTranscript {
    pub sample: usize,
    pub seed: u64,
    pub tokens: Vec<TokenId>,
}

pub fn format_transcript(samples: &[SampleTranscript]) -> String {
    let mut out = String::new();
    for s in samples {
        let _ = write!(out, "sample {} seed {}:", s.sample, s.seed);
        for t in &s.tokens {
            let _ = write!(out, " {t}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub transcripts: Vec<SampleTranscript>,
    /// Present in instrumented mode.
    pub record: Option<SweepRecord>,
    pub blocks: usize,
    pub accepted: usize,
    pub examined: usize,
    /// Measured uplink bytes per worker over the whole run.
    pub uplink_bytes: Vec<u64>,
    /// What the same blocks would cost uploading every probability as a
    /// 4-byte float.
    pub dense_bytes: u64,
}

impl RunReport {
    pub fn transcript(&self) -> String {
        format_transcript(&self.transcripts)
    }

    pub fn violations(&self) -> usize {
        self.record.as_ref().map_or(0, |r| r.violations.total())
    }
}

fn echo(config: &RunConfig, strategy: Strategy, profile: Vec<usize>) -> SweepEcho {
    SweepEcho {
        strategy,
        workers: config.workers,
        gamma: config.gamma,
        vocab_size: config.vocab_size,
        profile,
        temperature: config.temperature,
        seed: config.seed,
        samples: config.samples,
    }
}

/// Runs every sample against `pool`.
pub fn run_with_pool(config: &RunConfig, pool: &mut dyn WorkerPool) -> Result<RunReport> {
    config.validate()?;
    let draft = draft_model(config)?;
    let decode = config.decode_config()?;
    let mut transcripts = Vec::with_capacity(config.samples);
    let mut metrics: Vec<StepMetrics> = Vec::new();
    let (mut blocks, mut accepted, mut examined) = (0, 0, 0);
    let mut uplink_bytes = vec![0u64; config.workers];
    for sample in 0..config.samples {
        let seed = sample_seed(config, sample);
        let g = generate(&config.prompt, config.max_tokens, draft.as_ref(), pool, &decode, seed)?;
        blocks += g.blocks.len();
        for b in &g.blocks {
            accepted += b.outcome.accepted_count;
            examined += b.outcome.examined_steps();
        }
        for (total, bytes) in uplink_bytes.iter_mut().zip(g.uplink_bytes_per_worker()) {
            *total += bytes;
        }
        metrics.extend(g.metrics().cloned());
        transcripts.push(SampleTranscript {
            sample,
            seed,
            tokens: g.tokens,
        });
    }
    let record = if decode.instrumented {
        Some(sweep_aggregate(
            &metrics,
            echo(config, config.strategy, config.ks()?),
            EXACT_BOUND_TOLERANCE,
        )?)
    } else {
        None
    };
    Ok(RunReport {
        transcripts,
        record,
        blocks,
        accepted,
        examined,
        uplink_bytes,
        dense_bytes: (blocks * (config.gamma + 1) * config.vocab_size * 4) as u64,
    })
}

/// Runs `config` in its configured mode.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    match config.mode {
        Mode::Networked => run_with_pool(config, &mut connect_workers(config)?),
        Mode::InProcess | Mode::Instrumented => run_with_pool(config, &mut local_workers(config)?),
    }
}

/// Generation with uncompressed dense uploads, recording the exact
/// distributions at every examined position.
pub fn reference_generation(config: &RunConfig, seed: u64) -> Result<Generation> {
    let m = config.workers;
    let vocab = config.vocab()?;
    let mut pool = LocalWorkers::new(worker_models(config)?, &TopKProfile::lossless(m, vocab))?
        .with_uplink(UplinkMode::Dense)
        .with_shadows(true);
    let mut decode = config.decode_config()?;
    decode.profile = TopKProfile::lossless(m, vocab);
    decode.instrumented = true;
    let draft = draft_model(config)?;
    generate(&config.prompt, config.max_tokens, draft.as_ref(), &mut pool, &decode, seed)
}

/// Exact per-position distributions of the uncompressed trajectory, over
/// all samples in order.
pub fn reference_captures(config: &RunConfig) -> Result<Vec<StepCapture>> {
    config.validate()?;
    let mut captures = Vec::new();
    for sample in 0..config.samples {
        let g = reference_generation(config, sample_seed(config, sample))?;
        captures.extend(g.captures().cloned());
    }
    Ok(captures)
}

pub fn capture_metrics(
    captures: &[StepCapture],
    profile: &TopKProfile,
    weights: &WeightVector,
) -> Result<Vec<StepMetrics>> {
    captures
        .iter()
        .map(|c| StepMetrics::compute(&c.q, &c.workers, profile, weights))
        .collect()
}

/// One row per (k, strategy) for `k_values`, all evaluated on the same captures.
fn rows_for_captures(config: &RunConfig, captures: &[StepCapture]) -> Result<Vec<SweepRecord>> {
    let weights = config.weight_vector()?;
    let vocab = config.vocab()?;
    let mut rows = Vec::new();
    for &k in &config.k_values {
        let profile = TopKProfile::new(vec![k; config.workers], vocab)?;
        let metrics = capture_metrics(captures, &profile, &weights)?;
        for strategy in Strategy::ALL {
            rows.push(sweep_aggregate(
                &metrics,
                echo(config, strategy, profile.as_slice().to_vec()),
                EXACT_BOUND_TOLERANCE,
            )?);
        }
    }
    Ok(rows)
}

/// Whether Δ̄ and ε̄ never grow with K for one (temperature, strategy) group.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityCheck {
    pub temperature: f64,
    pub strategy: Strategy,
    pub delta_non_increasing: bool,
    pub eps_non_increasing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// Ordered by temperature, then K, then strategy.
    pub records: Vec<SweepRecord>,
    pub monotonicity: Vec<MonotonicityCheck>,
}

impl SweepReport {
    pub fn violations(&self) -> usize {
        self.records.iter().map(|r| r.violations.total()).sum()
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let yes = |b: bool| if b { "yes" } else { "NO" };
        for m in &self.monotonicity {
            let _ = writeln!(
                out,
                "T={} {}: delta_bar non-increasing in K: {}; eps_bar non-increasing in K: {}",
                m.temperature,
                m.strategy,
                yes(m.delta_non_increasing),
                yes(m.eps_non_increasing)
            );
        }
        let _ = writeln!(out, "bound violations: {}", self.violations());
        out
    }
}

fn non_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] <= w[0])
}

fn monotonicity(records: &[SweepRecord], temperature: f64) -> Vec<MonotonicityCheck> {
    Strategy::ALL
        .iter()
        .map(|&strategy| {
            let mut group: Vec<&SweepRecord> = records
                .iter()
                .filter(|r| r.echo.temperature == temperature && r.echo.strategy == strategy)
                .collect();
            group.sort_by_key(|r| r.echo.profile[0]);
            let deltas: Vec<f64> = group.iter().map(|r| r.delta_bar).collect();
            let eps: Vec<f64> = group.iter().map(|r| r.eps_bar).collect();
            MonotonicityCheck {
                temperature,
                strategy,
                delta_non_increasing: non_increasing(&deltas),
                eps_non_increasing: non_increasing(&eps),
            }
        })
        .collect()
}

/// For each temperature, decodes the uncompressed trajectory once and then
/// evaluates every K and both strategies on its recorded distributions.
pub fn sweep(config: &RunConfig) -> Result<SweepReport> {
    config.validate_sweep()?;
    let mut records = Vec::new();
    let mut checks = Vec::new();
    for &t in &config.temperatures {
        let mut point = config.clone();
        point.temperature = t;
        let captures = reference_captures(&point)?;
        let rows = rows_for_captures(&point, &captures)?;
        checks.extend(monotonicity(&rows, t));
        records.extend(rows);
    }
    Ok(SweepReport {
        records,
        monotonicity: checks,
    })
}

/// Draft and worker distributions at every examined position of the
/// uncompressed trajectory, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedTraces {
    pub draft: TraceFile,
    pub workers: Vec<TraceFile>,
}

pub fn traces_from_captures(vocab: Vocab, workers: usize, captures: &[StepCapture]) -> Result<RecordedTraces> {
    let mut draft = TraceFile::new(vocab);
    let mut files = vec![TraceFile::new(vocab); workers];
    for c in captures {
        draft.push(&c.q)?;
        for (file, d) in files.iter_mut().zip(&c.workers) {
            file.push(d)?;
        }
    }
    Ok(RecordedTraces { draft, workers: files })
}

pub fn record_traces(config: &RunConfig) -> Result<RecordedTraces> {
    let captures = reference_captures(config)?;
    traces_from_captures(config.vocab()?, config.workers, &captures)
}

fn trace_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.sftr"))
}

/// Writes `draft.sftr` and `worker<i>.sftr` into `dir`.
pub fn save_traces(dir: &Path, traces: &RecordedTraces) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = vec![trace_path(dir, "draft")];
    write_trace(&traces.draft, fs::File::create(&paths[0])?)?;
    for (i, t) in traces.workers.iter().enumerate() {
        let path = trace_path(dir, &format!("worker{i}"));
        write_trace(t, fs::File::create(&path)?)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn load_traces(dir: &Path, workers: usize) -> Result<RecordedTraces> {
    let load = |name: &str| -> Result<TraceFile> {
        let path = trace_path(dir, name);
        let file = fs::File::open(&path).map_err(|e| Error::Trace(format!("{}: {e}", path.display())))?;
        read_trace(std::io::BufReader::new(file))
    };
    let draft = load("draft")?;
    let files = (0..workers)
        .map(|i| load(&format!("worker{i}")))
        .collect::<Result<Vec<_>>>()?;
    for f in &files {
        if f.len() != draft.len() || f.vocab != draft.vocab {
            return Err(Error::Trace(format!(
                "worker trace has {} steps over {} tokens, draft trace {} over {}",
                f.len(),
                f.vocab.size(),
                draft.len(),
                draft.vocab.size()
            )));
        }
    }
    Ok(RecordedTraces { draft, workers: files })
}

/// Replays recorded traces step by step and evaluates every K in
/// `config.k_values` with both strategies.
pub fn rescore_traces(config: &RunConfig, traces: &RecordedTraces) -> Result<Vec<SweepRecord>> {
    config.validate_sweep()?;
    if traces.workers.len() != config.workers || traces.draft.vocab.size() != config.vocab_size {
        return Err(Error::Config(format!(
            "traces hold {} workers over {} tokens, config expects {} over {}",
            traces.workers.len(),
            traces.draft.vocab.size(),
            config.workers,
            config.vocab_size
        )));
    }
    if traces.draft.is_empty() {
        return Err(Error::Trace("trace holds no steps".into()));
    }
    let draft = TraceReplay::new(traces.draft.clone());
    let workers: Vec<TraceReplay> = traces.workers.iter().cloned().map(TraceReplay::new).collect();
    let mut captures = Vec::with_capacity(traces.draft.len());
    for _ in 0..traces.draft.len() {
        captures.push(StepCapture {
            q: draft.next_distribution(&[])?,
            workers: workers
                .iter()
                .map(|w| w.next_distribution(&[]))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    rows_for_captures(config, &captures)
}
