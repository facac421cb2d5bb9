//! One speculative block end to end (draft, broadcast, worker scoring,
//! upload, aggregation, verification, commit) and the generation loop on
//! top of it.

use crate::aggregation::{aggregate, aggregate_compressed, TopKProfile, WeightVector};
use crate::compression::{encode_payload, decode_payload, truncate_topk, Strategy, TopKPayload};
use crate::decode::{generate_draft, verify_block, PrefixState, VerificationOutcome};
use crate::dist::{derive_seed, Distribution, SeededStream, TokenId, WIRE_TOLERANCE};
use crate::error::{Error, Result};
use crate::metrics::StepMetrics;
use crate::models::ModelProvider;
use crate::transport::message::{ScoreBatch, FRAME_HEADER_LEN};

/// What a worker sent for one block: γ+1 entries, ordered by position.
#[derive(Debug, Clone, PartialEq)]
pub enum Upload {
    /// Top-K payloads as decoded from the wire.
    TopK(Vec<TopKPayload>),
    /// Full distributions at wire precision (the uncompressed baseline).
    Dense(Vec<Distribution>),
}

impl Upload {
    pub fn len(&self) -> usize {
        match self {
            Upload::TopK(p) => p.len(),
            Upload::Dense(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerScores {
    pub upload: Upload,
    /// Exact 64-bit distributions, present only in instrumented runs.
    pub shadow: Option<Vec<Distribution>>,
    /// Uplink bytes this block: frame header plus score batch.
    pub uplink_bytes: u64,
}

/// The set of workers as seen by the server.
///
/// `score` returns one entry per worker in worker-index order, whatever the
/// order in which the workers finished.
pub trait WorkerPool {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Starts a new generation from `prompt`.
    fn reset(&mut self, prompt: &[TokenId]) -> Result<()>;

    /// Scores the γ draft positions plus the bonus position on top of `prefix`.
    fn score(&mut self, prefix: &PrefixState, draft: &[TokenId]) -> Result<Vec<WorkerScores>>;

    fn commit(&mut self, tokens: &[TokenId]) -> Result<()>;
}

/// How in-process workers send their distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UplinkMode {
    TopK,
    Dense,
}

/// Rounds every probability to 32 bits and renormalizes in token order, as
/// a dense upload would arrive.
pub fn dense_wire_roundtrip(d: &Distribution) -> Result<Distribution> {
    let probs = d.probs().iter().map(|&p| p as f32 as f64).collect();
    Distribution::with_tolerance(probs, WIRE_TOLERANCE)
}

/// Size on the wire of one SCORES_UPLOAD frame carrying top-K payloads.
pub fn scores_upload_frame_len(ks: impl IntoIterator<Item = usize>) -> u64 {
    let body = ScoreBatch::encoded_len_for(ks.into_iter().map(crate::compression::encoded_len));
    (FRAME_HEADER_LEN + body) as u64
}

struct LocalWorker {
    model: Box<dyn ModelProvider>,
    k: usize,
    mirror: Vec<TokenId>,
}

/// Workers running in the server's process, with the same payload
/// encode/decode path as the networked runtime.
pub struct LocalWorkers {
    workers: Vec<LocalWorker>,
    uplink: UplinkMode,
    shadows: bool,
}

impl LocalWorkers {
    pub fn new(models: Vec<Box<dyn ModelProvider>>, profile: &TopKProfile) -> Result<Self> {
        if models.len() != profile.len() {
            return Err(Error::DimensionMismatch {
                left: models.len(),
                right: profile.len(),
            });
        }
        let workers = models
            .into_iter()
            .zip(profile.as_slice())
            .map(|(model, &k)| LocalWorker {
                model,
                k,
                mirror: Vec::new(),
            })
            .collect();
        Ok(Self {
            workers,
            uplink: UplinkMode::TopK,
            shadows: false,
        })
    }

    pub fn with_uplink(mut self, uplink: UplinkMode) -> Self {
        self.uplink = uplink;
        self
    }

    /// Also hand the exact distributions to the server.
    pub fn with_shadows(mut self, shadows: bool) -> Self {
        self.shadows = shadows;
        self
    }
}

fn local_failure(worker: usize, e: Error) -> Error {
    Error::Worker {
        worker,
        endpoint: "in-process".into(),
        reason: e.to_string(),
    }
}

impl LocalWorker {
    fn score(&self, draft: &[TokenId], uplink: UplinkMode, shadows: bool) -> Result<WorkerScores> {
        let mut context = self.mirror.clone();
        let mut exact = Vec::with_capacity(draft.len() + 1);
        for t in 0..=draft.len() {
            exact.push(self.model.next_distribution(&context)?);
            if let Some(&x) = draft.get(t) {
                context.push(x);
            }
        }
        let (upload, uplink_bytes) = match uplink {
            UplinkMode::TopK => {
                let mut payloads = Vec::with_capacity(exact.len());
                let mut lens = Vec::with_capacity(exact.len());
                for d in &exact {
                    let bytes = encode_payload(&truncate_topk(d, self.k)?);
                    lens.push(bytes.len());
                    payloads.push(decode_payload(&bytes)?);
                }
                let frame = (FRAME_HEADER_LEN + ScoreBatch::encoded_len_for(lens)) as u64;
                (Upload::TopK(payloads), frame)
            }
            UplinkMode::Dense => {
                let rows = exact.iter().map(dense_wire_roundtrip).collect::<Result<Vec<_>>>()?;
                let bytes = rows.iter().map(|d| d.len() as u64 * 4).sum();
                (Upload::Dense(rows), bytes)
            }
        };
        Ok(WorkerScores {
            upload,
            shadow: shadows.then_some(exact),
            uplink_bytes,
        })
    }
}

impl WorkerPool for LocalWorkers {
    fn len(&self) -> usize {
        self.workers.len()
    }

    fn reset(&mut self, prompt: &[TokenId]) -> Result<()> {
        for w in &mut self.workers {
            w.mirror = prompt.to_vec();
        }
        Ok(())
    }

    fn score(&mut self, prefix: &PrefixState, draft: &[TokenId]) -> Result<Vec<WorkerScores>> {
        self.workers
            .iter()
            .enumerate()
            .map(|(i, w)| {
                if w.mirror != prefix.tokens() {
                    return Err(local_failure(i, Error::Protocol("prefix mirror diverged".into())));
                }
                w.score(draft, self.uplink, self.shadows).map_err(|e| local_failure(i, e))
            })
            .collect()
    }

    fn commit(&mut self, tokens: &[TokenId]) -> Result<()> {
        for w in &mut self.workers {
            w.mirror.extend_from_slice(tokens);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub gamma: usize,
    pub weights: WeightVector,
    pub profile: TopKProfile,
    pub strategy: Strategy,
    pub eos: Option<TokenId>,
    /// Collect exact shadows and per-position metrics.
    pub instrumented: bool,
}

impl DecodeConfig {
    pub fn validate(&self, pool_len: usize) -> Result<()> {
        if self.gamma == 0 {
            return Err(Error::InvalidParameter("gamma must be at least 1".into()));
        }
        if self.weights.len() != pool_len || self.profile.len() != pool_len {
            return Err(Error::InvalidParameter(format!(
                "{pool_len} workers but {} weights and {} k values",
                self.weights.len(),
                self.profile.len()
            )));
        }
        Ok(())
    }
}

/// The draft-sampling and verification streams of one generation.
///
/// Both derive from the generation seed and are never shared with model
/// providers.
#[derive(Debug, Clone)]
pub struct DecodeStreams {
    pub draft: SeededStream,
    pub verify: SeededStream,
}

impl DecodeStreams {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            draft: SeededStream::new(derive_seed(seed, 1)),
            verify: SeededStream::new(derive_seed(seed, 2)),
        }
    }
}

/// Exact distributions at one verification position.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCapture {
    pub q: Distribution,
    pub workers: Vec<Distribution>,
}

/// Everything recorded for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRecord {
    pub outcome: VerificationOutcome,
    pub committed: Vec<TokenId>,
    pub uplink_bytes: Vec<u64>,
    pub captures: Vec<StepCapture>,
    pub metrics: Vec<StepMetrics>,
    pub eos_reached: bool,
}

/// Runs one block and commits its tokens, keeping at most `budget` of them.
pub fn decode_step(
    prefix: &mut PrefixState,
    draft_model: &dyn ModelProvider,
    pool: &mut dyn WorkerPool,
    config: &DecodeConfig,
    streams: &mut DecodeStreams,
    budget: usize,
) -> Result<BlockRecord> {
    let draft = generate_draft(draft_model, prefix, config.gamma, &mut streams.draft)?;
    let scores = pool.score(prefix, draft.tokens())?;
    if scores.len() != pool.len() {
        return Err(Error::Protocol(format!(
            "expected {} worker replies, got {}",
            pool.len(),
            scores.len()
        )));
    }
    for (i, s) in scores.iter().enumerate() {
        if s.upload.len() != config.gamma + 1 {
            return Err(Error::Worker {
                worker: i,
                endpoint: String::new(),
                reason: format!("sent {} positions, expected {}", s.upload.len(), config.gamma + 1),
            });
        }
    }

    let mut aggregated = Vec::with_capacity(config.gamma + 1);
    for t in 0..=config.gamma {
        let p_bar = match &scores[0].upload {
            Upload::TopK(_) => {
                let payloads = scores
                    .iter()
                    .map(|s| match &s.upload {
                        Upload::TopK(p) => Ok(p[t].clone()),
                        Upload::Dense(_) => Err(Error::Protocol("mixed upload kinds".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                aggregate_compressed(&payloads, &config.weights, config.strategy)?
            }
            Upload::Dense(_) => {
                let dists = scores
                    .iter()
                    .map(|s| match &s.upload {
                        Upload::Dense(d) => Ok(d[t].clone()),
                        Upload::TopK(_) => Err(Error::Protocol("mixed upload kinds".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                aggregate(&dists, &config.weights)?
            }
        };
        aggregated.push(p_bar);
    }

    let outcome = verify_block(&draft, &aggregated, &mut streams.verify)?;

    let mut captures = Vec::new();
    let mut metrics = Vec::new();
    if config.instrumented {
        let shadows = scores
            .iter()
            .map(|s| s.shadow.as_ref())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Instrumentation("worker replies carry no shadow distributions".into()))?;
        for t in 0..outcome.examined_steps() {
            let capture = StepCapture {
                q: draft.draft_dists()[t].clone(),
                workers: shadows.iter().map(|s| s[t].clone()).collect(),
            };
            metrics.push(StepMetrics::compute(
                &capture.q,
                &capture.workers,
                &config.profile,
                &config.weights,
            )?);
            captures.push(capture);
        }
    }

    let mut committed: Vec<TokenId> = outcome.emitted_tokens.iter().copied().take(budget).collect();
    let mut eos_reached = false;
    if let Some(eos) = config.eos {
        if let Some(pos) = committed.iter().position(|&t| t == eos) {
            committed.truncate(pos + 1);
            eos_reached = true;
        }
    }
    prefix.commit(&committed);
    pool.commit(&committed)?;

    Ok(BlockRecord {
        outcome,
        committed,
        uplink_bytes: scores.iter().map(|s| s.uplink_bytes).collect(),
        captures,
        metrics,
        eos_reached,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Committed tokens after the prompt.
    pub tokens: Vec<TokenId>,
    pub blocks: Vec<BlockRecord>,
}

impl Generation {
    pub fn metrics(&self) -> impl Iterator<Item = &StepMetrics> {
        self.blocks.iter().flat_map(|b| b.metrics.iter())
    }

    pub fn captures(&self) -> impl Iterator<Item = &StepCapture> {
        self.blocks.iter().flat_map(|b| b.captures.iter())
    }

    pub fn uplink_bytes_per_worker(&self) -> Vec<u64> {
        let m = self.blocks.first().map_or(0, |b| b.uplink_bytes.len());
        (0..m)
            .map(|i| self.blocks.iter().map(|b| b.uplink_bytes[i]).sum())
            .collect()
    }
}

/// Repeats [`decode_step`] until `max_tokens` tokens are committed or the
/// end-of-sequence token is.
pub fn generate(
    prompt: &[TokenId],
    max_tokens: usize,
    draft_model: &dyn ModelProvider,
    pool: &mut dyn WorkerPool,
    config: &DecodeConfig,
    seed: u64,
) -> Result<Generation> {
    if max_tokens == 0 {
        return Err(Error::InvalidParameter("max_tokens must be at least 1".into()));
    }
    config.validate(pool.len())?;
    pool.reset(prompt)?;
    let mut prefix = PrefixState::new(prompt.to_vec());
    let mut streams = DecodeStreams::from_seed(seed);
    let mut tokens = Vec::with_capacity(max_tokens);
    let mut blocks = Vec::new();
    while tokens.len() < max_tokens {
        let block = decode_step(
            &mut prefix,
            draft_model,
            pool,
            config,
            &mut streams,
            max_tokens - tokens.len(),
        )?;
        tokens.extend_from_slice(&block.committed);
        let done = block.eos_reached;
        blocks.push(block);
        if done {
            break;
        }
    }
    Ok(Generation { tokens, blocks })
}
