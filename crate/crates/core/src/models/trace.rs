//! Recorded per-step distributions.
//!
//! File layout, little-endian: magic `SFTR`, `u16` version (1), `u32`
//! vocab size, `u32` step count, then `step count` dense rows of `vocab size`
//! `f32` probabilities.

use std::io::{Read, Write};
use std::sync::Mutex;

use super::ModelProvider;
use crate::dist::{Distribution, TokenId, Vocab, WIRE_TOLERANCE};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SFTR";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub vocab: Vocab,
    pub rows: Vec<Vec<f32>>,
}

impl TraceFile {
    pub fn new(vocab: Vocab) -> Self {
        Self {
            vocab,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, d: &Distribution) -> Result<()> {
        if d.len() != self.vocab.size() {
            return Err(Error::DimensionMismatch {
                left: self.vocab.size(),
                right: d.len(),
            });
        }
        self.rows.push(d.probs().iter().map(|&p| p as f32).collect());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row `step` as a distribution, renormalized if rounding moved its sum.
    pub fn distribution(&self, step: usize) -> Result<Distribution> {
        let row = self
            .rows
            .get(step)
            .ok_or(Error::TraceExhausted { steps: self.rows.len() })?;
        Distribution::with_tolerance(row.iter().map(|&p| p as f64).collect(), WIRE_TOLERANCE)
            .map_err(|e| Error::Trace(format!("row {step}: {e}")))
    }
}

pub fn write_trace<W: Write>(trace: &TraceFile, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + trace.rows.len() * trace.vocab.size() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(trace.vocab.size() as u32).to_le_bytes());
    buf.extend_from_slice(&(trace.rows.len() as u32).to_le_bytes());
    for row in &trace.rows {
        for p in row {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_trace<R: Read>(mut input: R) -> Result<TraceFile> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Trace(format!("header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Trace("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Trace(format!("unsupported version {version}")));
    }
    let vocab_size = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let steps = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let vocab = Vocab::new(vocab_size).map_err(|e| Error::Trace(e.to_string()))?;
    let body = &bytes[HEADER_LEN..];
    let expected = steps
        .checked_mul(vocab_size)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Trace("step count overflows".into()))?;
    if body.len() != expected {
        return Err(Error::Trace(format!(
            "header declares {steps} steps of {vocab_size} entries ({expected} bytes), body has {} bytes",
            body.len()
        )));
    }
    let rows: Vec<Vec<f32>> = body
        .chunks_exact(vocab_size * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect();
    let trace = TraceFile { vocab, rows };
    for step in 0..trace.len() {
        trace.distribution(step)?;
    }
    Ok(trace)
}

/// Replays trace rows in call order, ignoring the prefix.
///
/// Stateful: confine one replayer to one consumer.
#[derive(Debug)]
pub struct TraceReplay {
    trace: TraceFile,
    cursor: Mutex<usize>,
}

impl TraceReplay {
    pub fn new(trace: TraceFile) -> Self {
        Self {
            trace,
            cursor: Mutex::new(0),
        }
    }

    pub fn position(&self) -> usize {
        *self.cursor.lock().unwrap()
    }
}

impl ModelProvider for TraceReplay {
    fn vocab(&self) -> Vocab {
        self.trace.vocab
    }

    fn next_distribution(&self, _prefix: &[TokenId]) -> Result<Distribution> {
        let mut cursor = self.cursor.lock().unwrap();
        let d = self.trace.distribution(*cursor)?;
        *cursor += 1;
        Ok(d)
    }
}

/// Wraps a provider and keeps every distribution it returns.
pub struct TraceRecorder<P> {
    inner: P,
    trace: Mutex<TraceFile>,
}

impl<P: ModelProvider> TraceRecorder<P> {
    pub fn new(inner: P) -> Self {
        let trace = Mutex::new(TraceFile::new(inner.vocab()));
        Self { inner, trace }
    }

    pub fn into_trace(self) -> TraceFile {
        self.trace.into_inner().unwrap()
    }
}

impl<P: ModelProvider> ModelProvider for TraceRecorder<P> {
    fn vocab(&self) -> Vocab {
        self.inner.vocab()
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> Result<Distribution> {
        let d = self.inner.next_distribution(prefix)?;
        self.trace.lock().unwrap().push(&d)?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{SyntheticModel, SyntheticModelSpec};

    fn recorded(steps: usize) -> (TraceFile, Vec<Distribution>) {
        let spec = SyntheticModelSpec::new(5, Vocab::new(32).unwrap(), 2.0, 1.0);
        let rec = TraceRecorder::new(SyntheticModel::new(spec).unwrap());
        let live: Vec<_> = (0..steps)
            .map(|i| rec.next_distribution(&[TokenId(i as u32)]).unwrap())
            .collect();
        (rec.into_trace(), live)
    }

    #[test]
    fn record_then_replay() {
        let (trace, live) = recorded(10);
        let mut bytes = Vec::new();
        write_trace(&trace, &mut bytes).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 10 * 32 * 4);
        let back = read_trace(bytes.as_slice()).unwrap();
        assert_eq!(back, trace);

        let replay = TraceReplay::new(back);
        for d in &live {
            let r = replay.next_distribution(&[]).unwrap();
            for (a, b) in r.probs().iter().zip(d.probs()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        assert!(matches!(
            replay.next_distribution(&[]),
            Err(Error::TraceExhausted { steps: 10 })
        ));
    }

    #[test]
    fn malformed_files_rejected() {
        let (trace, _) = recorded(2);
        let mut bytes = Vec::new();
        write_trace(&trace, &mut bytes).unwrap();

        assert!(read_trace(&bytes[..5]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_trace(bad.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(read_trace(bad.as_slice()).is_err());
        // step count mismatch
        let mut bad = bytes.clone();
        bad[10..14].copy_from_slice(&3u32.to_le_bytes());
        assert!(read_trace(bad.as_slice()).is_err());
        // a row that no longer sums to one
        let mut bad = bytes;
        bad[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&0.9f32.to_le_bytes());
        assert!(read_trace(bad.as_slice()).is_err());
    }
}
