//! Worker side of the protocol: a TCP listener that scores drafts with a
//! local model and uploads top-K payloads.

use std::io::{BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};

use super::message::{
    error_body, read_frame, write_frame, CommitNotice, Configure, DraftBroadcast, Hello, Message,
    MessageKind, ScoreBatch, PROTOCOL_VERSION,
};
use crate::compression::{encode_payload, truncate_topk};
use crate::dist::TokenId;
use crate::error::{Error, FrameError, Result};
use crate::models::{prefix_hash, ModelProvider};

/// Builds the worker's model once the server has configured it.
pub type ModelFactory<'a> = dyn Fn(&Configure) -> Result<Box<dyn ModelProvider>> + 'a;

/// How a connection ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionEnd {
    Shutdown,
    Closed,
}

struct Configured {
    config: Configure,
    model: Box<dyn ModelProvider>,
}

struct Session<'f> {
    factory: &'f ModelFactory<'f>,
    configured: Option<Configured>,
    mirror: Vec<TokenId>,
    last_id: Option<u64>,
}

enum Reply {
    Send(Message),
    Nothing,
    Fatal(String),
    Shutdown,
}

impl<'f> Session<'f> {
    fn handle(&mut self, m: Message) -> Reply {
        if let Some(last) = self.last_id {
            if m.correlation_id <= last {
                return Reply::Fatal(format!(
                    "correlation id {} does not follow {last}",
                    m.correlation_id
                ));
            }
        }
        self.last_id = Some(m.correlation_id);
        let id = m.correlation_id;
        match m.kind {
            MessageKind::Hello => match Hello::decode(&m.body) {
                Ok(h) if h.protocol_version == PROTOCOL_VERSION => Reply::Send(Message::new(
                    MessageKind::Hello,
                    id,
                    Hello {
                        protocol_version: PROTOCOL_VERSION,
                    }
                    .encode(),
                )),
                Ok(h) => Reply::Fatal(format!("unsupported protocol version {}", h.protocol_version)),
                Err(e) => Reply::Fatal(e.to_string()),
            },
            MessageKind::Configure => {
                let config = match Configure::decode(&m.body) {
                    Ok(c) => c,
                    Err(e) => return Reply::Fatal(e.to_string()),
                };
                match (self.factory)(&config) {
                    Ok(model) if model.vocab().size() == config.vocab_size as usize => {
                        self.configured = Some(Configured { config, model });
                        self.mirror.clear();
                        Reply::Send(Message::new(MessageKind::Configure, id, m.body))
                    }
                    Ok(model) => Reply::Fatal(format!(
                        "model vocabulary is {}, configured {}",
                        model.vocab().size(),
                        config.vocab_size
                    )),
                    Err(e) => Reply::Fatal(format!("cannot build model: {e}")),
                }
            }
            MessageKind::DraftBroadcast => {
                let Some(configured) = &self.configured else {
                    return Reply::Fatal("not configured".into());
                };
                let broadcast = match DraftBroadcast::decode(&m.body) {
                    Ok(b) => b,
                    Err(e) => return Reply::Fatal(e.to_string()),
                };
                if broadcast.draft.len() != configured.config.gamma as usize {
                    return Reply::Fatal(format!(
                        "draft has {} tokens, configured gamma is {}",
                        broadcast.draft.len(),
                        configured.config.gamma
                    ));
                }
                if broadcast.reset {
                    self.mirror.clear();
                }
                self.mirror.extend_from_slice(&broadcast.delta);
                match score(configured, &self.mirror, &broadcast.draft) {
                    Ok(batch) => Reply::Send(Message::new(MessageKind::ScoresUpload, id, batch.encode())),
                    Err(e) => Reply::Fatal(format!("scoring failed: {e}")),
                }
            }
            MessageKind::CommitNotice => match CommitNotice::decode(&m.body) {
                Ok(c) => {
                    self.mirror.extend_from_slice(&c.tokens);
                    Reply::Nothing
                }
                Err(e) => Reply::Fatal(e.to_string()),
            },
            MessageKind::Shutdown => Reply::Shutdown,
            MessageKind::ScoresUpload | MessageKind::Error => {
                Reply::Fatal(format!("unexpected {} from server", m.kind.name()))
            }
        }
    }
}

fn score(configured: &Configured, prefix: &[TokenId], draft: &[TokenId]) -> Result<ScoreBatch> {
    let k = configured.config.k as usize;
    let mut context = prefix.to_vec();
    let mut payloads = Vec::with_capacity(draft.len() + 1);
    for t in 0..=draft.len() {
        let d = configured.model.next_distribution(&context)?;
        payloads.push(encode_payload(&truncate_topk(&d, k)?));
        if let Some(&x) = draft.get(t) {
            context.push(x);
        }
    }
    Ok(ScoreBatch {
        checksum: prefix_hash(prefix),
        payloads,
    })
}

/// Serves one server connection until it closes or sends SHUTDOWN.
///
/// Protocol violations are answered with an ERROR frame, then the
/// connection is closed.
pub fn serve_connection(stream: TcpStream, factory: &ModelFactory<'_>) -> Result<ConnectionEnd> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut session = Session {
        factory,
        configured: None,
        mirror: Vec::new(),
        last_id: None,
    };
    loop {
        let m = match read_frame(&mut reader) {
            Ok(m) => m,
            Err(FrameError::Closed) => return Ok(ConnectionEnd::Closed),
            Err(e) => {
                let _ = write_frame(&mut writer, &Message::new(MessageKind::Error, 0, error_body(&e.to_string())));
                return Err(e.into());
            }
        };
        let id = m.correlation_id;
        match session.handle(m) {
            Reply::Send(reply) => {
                write_frame(&mut writer, &reply)?;
            }
            Reply::Nothing => {}
            Reply::Shutdown => {
                writer.flush()?;
                return Ok(ConnectionEnd::Shutdown);
            }
            Reply::Fatal(reason) => {
                let _ = write_frame(&mut writer, &Message::new(MessageKind::Error, id, error_body(&reason)));
                return Err(Error::Protocol(reason));
            }
        }
    }
}

/// Accepts server connections one after another until one of them sends
/// SHUTDOWN. A failed connection is reported through `on_error` and the
/// listener keeps accepting.
pub fn worker_serve(
    listener: &TcpListener,
    factory: &ModelFactory<'_>,
    mut on_error: impl FnMut(&Error),
) -> Result<()> {
    for stream in listener.incoming() {
        match serve_connection(stream?, factory) {
            Ok(ConnectionEnd::Shutdown) => return Ok(()),
            Ok(ConnectionEnd::Closed) => {}
            Err(e) => on_error(&e),
        }
    }
    Ok(())
}
