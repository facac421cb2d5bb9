//! Server side of the protocol: one TCP connection per worker, driven in
//! parallel for every block.

use std::io::{self, BufReader, BufWriter, Read};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use super::message::{
    error_reason, read_frame, write_frame, CommitNotice, Configure, DraftBroadcast, Hello, Message,
    MessageKind, ScoreBatch, PROTOCOL_VERSION,
};
use crate::compression::{decode_payload, Strategy};
use crate::decode::PrefixState;
use crate::dist::TokenId;
use crate::engine::{Upload, WorkerPool, WorkerScores};
use crate::error::{Error, FrameError, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

/// Counts bytes pulled from the socket.
struct CountingReader<R> {
    inner: R,
    count: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count += n as u64;
        Ok(n)
    }
}

struct Connection {
    index: usize,
    endpoint: String,
    reader: CountingReader<BufReader<TcpStream>>,
    writer: BufWriter<TcpStream>,
    next_id: u64,
    config: Configure,
    timeout: Duration,
}

impl Connection {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Worker {
            worker: self.index,
            endpoint: self.endpoint.clone(),
            reason: reason.into(),
        }
    }

    fn frame_failure(&self, e: FrameError) -> Error {
        match e {
            FrameError::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                self.fail(format!("no reply within {:?}", self.timeout))
            }
            FrameError::Closed => self.fail("connection closed"),
            other => self.fail(other.to_string()),
        }
    }

    fn send(&mut self, kind: MessageKind, body: Vec<u8>) -> Result<u64> {
        let id = self.next_id;
        self.next_id += 1;
        write_frame(&mut self.writer, &Message::new(kind, id, body)).map_err(|e| self.frame_failure(e))?;
        Ok(id)
    }

    /// Reads the reply to `id`, returning it with the bytes it took.
    fn receive(&mut self, id: u64, expected: MessageKind) -> Result<(Message, u64)> {
        let before = self.reader.count;
        let m = read_frame(&mut self.reader).map_err(|e| self.frame_failure(e))?;
        let bytes = self.reader.count - before;
        if m.kind == MessageKind::Error {
            let reason = error_reason(&m.body).unwrap_or_else(|e| e.to_string());
            return Err(self.fail(format!("worker reported: {reason}")));
        }
        if m.kind != expected {
            return Err(self.fail(format!("expected {}, got {}", expected.name(), m.kind.name())));
        }
        if m.correlation_id != id {
            return Err(self.fail(format!("reply to {} carries correlation id {}", id, m.correlation_id)));
        }
        Ok((m, bytes))
    }

    fn handshake(&mut self) -> Result<()> {
        let hello = Hello {
            protocol_version: PROTOCOL_VERSION,
        };
        let id = self.send(MessageKind::Hello, hello.encode())?;
        let (reply, _) = self.receive(id, MessageKind::Hello)?;
        let theirs = Hello::decode(&reply.body).map_err(|e| self.fail(e.to_string()))?;
        if theirs != hello {
            return Err(self.fail(format!("protocol version {}", theirs.protocol_version)));
        }
        let body = self.config.encode();
        let id = self.send(MessageKind::Configure, body.clone())?;
        let (reply, _) = self.receive(id, MessageKind::Configure)?;
        if reply.body != body {
            return Err(self.fail("configuration was not acknowledged verbatim"));
        }
        Ok(())
    }

    fn score(&mut self, broadcast: &DraftBroadcast, checksum: u64) -> Result<WorkerScores> {
        let id = self.send(MessageKind::DraftBroadcast, broadcast.encode())?;
        let (reply, bytes) = self.receive(id, MessageKind::ScoresUpload)?;
        let batch = ScoreBatch::decode(&reply.body).map_err(|e| self.fail(e.to_string()))?;
        if batch.checksum != checksum {
            return Err(self.fail(format!(
                "prefix checksum {:016x}, expected {checksum:016x}",
                batch.checksum
            )));
        }
        if batch.payloads.len() != broadcast.draft.len() + 1 {
            return Err(self.fail(format!(
                "{} payloads for {} draft tokens",
                batch.payloads.len(),
                broadcast.draft.len()
            )));
        }
        let mut payloads = Vec::with_capacity(batch.payloads.len());
        for (t, bytes) in batch.payloads.iter().enumerate() {
            let p = decode_payload(bytes).map_err(|e| self.fail(format!("payload {t}: {e}")))?;
            if p.vocab_size() != self.config.vocab_size as usize || p.k() != self.config.k as usize {
                return Err(self.fail(format!(
                    "payload {t} has k={} over {} tokens, configured k={} over {}",
                    p.k(),
                    p.vocab_size(),
                    self.config.k,
                    self.config.vocab_size
                )));
            }
            payloads.push(p);
        }
        Ok(WorkerScores {
            upload: Upload::TopK(payloads),
            shadow: None,
            uplink_bytes: bytes,
        })
    }
}

/// Per-worker settings sent in CONFIGURE.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSetup {
    pub endpoint: String,
    pub k: usize,
    pub weight: f64,
    pub seed_material: u64,
}

/// Workers reached over TCP.
pub struct RemoteWorkers {
    connections: Vec<Connection>,
    pending_reset: Option<Vec<TokenId>>,
}

impl RemoteWorkers {
    /// Connects to every worker, exchanges HELLO and CONFIGURE.
    pub fn connect(
        setups: &[WorkerSetup],
        vocab_size: usize,
        gamma: usize,
        strategy: Strategy,
        timeout: Duration,
    ) -> Result<Self> {
        let mut connections = Vec::with_capacity(setups.len());
        for (index, setup) in setups.iter().enumerate() {
            let fail = |reason: String| Error::Worker {
                worker: index,
                endpoint: setup.endpoint.clone(),
                reason,
            };
            let addr: SocketAddr = setup
                .endpoint
                .to_socket_addrs()
                .map_err(|e| fail(e.to_string()))?
                .next()
                .ok_or_else(|| fail("address did not resolve".into()))?;
            let stream = TcpStream::connect_timeout(&addr, timeout).map_err(|e| fail(e.to_string()))?;
            stream.set_read_timeout(Some(timeout)).map_err(|e| fail(e.to_string()))?;
            stream.set_nodelay(true).map_err(|e| fail(e.to_string()))?;
            let read_half = stream.try_clone().map_err(|e| fail(e.to_string()))?;
            let mut conn = Connection {
                index,
                endpoint: setup.endpoint.clone(),
                reader: CountingReader {
                    inner: BufReader::new(read_half),
                    count: 0,
                },
                writer: BufWriter::new(stream),
                next_id: 1,
                config: Configure {
                    vocab_size: vocab_size as u32,
                    k: setup.k as u32,
                    weight: setup.weight,
                    gamma: gamma as u32,
                    strategy,
                    seed_material: setup.seed_material,
                },
                timeout,
            };
            conn.handshake()?;
            connections.push(conn);
        }
        Ok(Self {
            connections,
            pending_reset: None,
        })
    }

    /// Sends SHUTDOWN to every worker. Failures are ignored: a worker that
    /// is already gone needs no shutdown.
    pub fn shutdown(mut self) {
        for c in &mut self.connections {
            let _ = c.send(MessageKind::Shutdown, Vec::new());
        }
    }
}

impl WorkerPool for RemoteWorkers {
    fn len(&self) -> usize {
        self.connections.len()
    }

    fn reset(&mut self, prompt: &[TokenId]) -> Result<()> {
        self.pending_reset = Some(prompt.to_vec());
        Ok(())
    }

    fn score(&mut self, prefix: &PrefixState, draft: &[TokenId]) -> Result<Vec<WorkerScores>> {
        let broadcast = DraftBroadcast {
            reset: self.pending_reset.is_some(),
            delta: self.pending_reset.take().unwrap_or_default(),
            draft: draft.to_vec(),
        };
        let checksum = prefix.checksum();
        let results: Vec<Result<WorkerScores>> = thread::scope(|s| {
            let handles: Vec<_> = self
                .connections
                .iter_mut()
                .map(|c| {
                    let broadcast = &broadcast;
                    s.spawn(move || c.score(broadcast, checksum))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("scoring thread panicked".into()))))
                .collect()
        });
        results.into_iter().collect()
    }

    fn commit(&mut self, tokens: &[TokenId]) -> Result<()> {
        let notice = CommitNotice {
            tokens: tokens.to_vec(),
        }
        .encode();
        for c in &mut self.connections {
            c.send(MessageKind::CommitNotice, notice.clone())?;
        }
        Ok(())
    }
}
