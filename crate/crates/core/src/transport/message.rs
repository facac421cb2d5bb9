//! Framing and message bodies.
//!
//! Frame: `u32 body length, u8 kind, u64 correlation id, body`, all
//! little-endian. Bodies larger than 64 MiB are rejected.

use std::io::{self, Read, Write};

use crate::compression::Strategy;
use crate::dist::TokenId;
use crate::error::FrameError;

pub const FRAME_HEADER_LEN: usize = 4 + 1 + 8;
pub const MAX_FRAME_BODY: usize = 64 << 20;
pub const PROTOCOL_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Hello = 0,
    Configure = 1,
    DraftBroadcast = 2,
    ScoresUpload = 3,
    CommitNotice = 4,
    Shutdown = 5,
    Error = 6,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        MessageKind::Hello,
        MessageKind::Configure,
        MessageKind::DraftBroadcast,
        MessageKind::ScoresUpload,
        MessageKind::CommitNotice,
        MessageKind::Shutdown,
        MessageKind::Error,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::Hello => "HELLO",
            MessageKind::Configure => "CONFIGURE",
            MessageKind::DraftBroadcast => "DRAFT_BROADCAST",
            MessageKind::ScoresUpload => "SCORES_UPLOAD",
            MessageKind::CommitNotice => "COMMIT_NOTICE",
            MessageKind::Shutdown => "SHUTDOWN",
            MessageKind::Error => "ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub correlation_id: u64,
    pub body: Vec<u8>,
}

impl Message {
    pub fn new(kind: MessageKind, correlation_id: u64, body: Vec<u8>) -> Self {
        Self {
            kind,
            correlation_id,
            body,
        }
    }

    pub fn frame_len(&self) -> usize {
        FRAME_HEADER_LEN + self.body.len()
    }
}

pub fn encode_frame(m: &Message) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.frame_len());
    out.extend_from_slice(&(m.body.len() as u32).to_le_bytes());
    out.push(m.kind as u8);
    out.extend_from_slice(&m.correlation_id.to_le_bytes());
    out.extend_from_slice(&m.body);
    out
}

fn parse_header(header: &[u8; FRAME_HEADER_LEN]) -> Result<(usize, MessageKind, u64), FrameError> {
    let len = u32::from_le_bytes(header[0..4].try_into().unwrap());
    if len as usize > MAX_FRAME_BODY {
        return Err(FrameError::Oversize(len as u64));
    }
    let kind = MessageKind::from_u8(header[4]).ok_or(FrameError::UnknownKind(header[4]))?;
    let id = u64::from_le_bytes(header[5..13].try_into().unwrap());
    Ok((len as usize, kind, id))
}

/// Parses one frame from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), FrameError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(FrameError::Truncated {
            needed: FRAME_HEADER_LEN,
            available: bytes.len(),
        });
    }
    let (len, kind, id) = parse_header(bytes[..FRAME_HEADER_LEN].try_into().unwrap())?;
    let total = FRAME_HEADER_LEN + len;
    if bytes.len() < total {
        return Err(FrameError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    let body = bytes[FRAME_HEADER_LEN..total].to_vec();
    Ok((Message::new(kind, id, body), total))
}

/// Reads one frame. A clean end of stream before the header yields
/// [`FrameError::Closed`].
pub fn read_frame<R: Read>(r: &mut R) -> Result<Message, FrameError> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut filled = 0;
    while filled < FRAME_HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(FrameError::Closed),
            Ok(0) => {
                return Err(FrameError::Truncated {
                    needed: FRAME_HEADER_LEN,
                    available: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (len, kind, id) = parse_header(&header)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FrameError::Truncated {
                needed: FRAME_HEADER_LEN + len,
                available: FRAME_HEADER_LEN,
            }
        } else {
            e.into()
        }
    })?;
    Ok(Message::new(kind, id, body))
}

/// Writes and flushes one frame, returning the bytes written.
pub fn write_frame<W: Write>(w: &mut W, m: &Message) -> Result<usize, FrameError> {
    if m.body.len() > MAX_FRAME_BODY {
        return Err(FrameError::Oversize(m.body.len() as u64));
    }
    let bytes = encode_frame(m);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], kind: MessageKind) -> Self {
        Self {
            bytes,
            pos: 0,
            kind: kind.name(),
        }
    }

    fn malformed(&self, reason: impl Into<String>) -> FrameError {
        FrameError::MalformedBody {
            kind: self.kind,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.malformed(format!("needs {n} more bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, FrameError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, FrameError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tokens(&mut self) -> Result<Vec<TokenId>, FrameError> {
        let n = self.u32()? as usize;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.malformed("token count overflows"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| TokenId(u32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }

    fn finish(self) -> Result<(), FrameError> {
        if self.pos != self.bytes.len() {
            return Err(self.malformed(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_tokens(out: &mut Vec<u8>, tokens: &[TokenId]) {
    out.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&t.0.to_le_bytes());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hello {
    pub protocol_version: u16,
}

impl Hello {
    pub fn encode(&self) -> Vec<u8> {
        self.protocol_version.to_le_bytes().to_vec()
    }

    pub fn decode(body: &[u8]) -> Result<Self, FrameError> {
        let mut c = Cursor::new(body, MessageKind::Hello);
        let protocol_version = c.u16()?;
        c.finish()?;
        Ok(Self { protocol_version })
    }
}

/// Per-worker session parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Configure {
    pub vocab_size: u32,
    pub k: u32,
    pub weight: f64,
    pub gamma: u32,
    pub strategy: Strategy,
    pub seed_material: u64,
}

impl Configure {
    pub const ENCODED_LEN: usize = 4 + 4 + 8 + 4 + 1 + 8;

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        out.extend_from_slice(&self.k.to_le_bytes());
        out.extend_from_slice(&self.weight.to_le_bytes());
        out.extend_from_slice(&self.gamma.to_le_bytes());
        out.push(self.strategy.code());
        out.extend_from_slice(&self.seed_material.to_le_bytes());
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, FrameError> {
        let mut c = Cursor::new(body, MessageKind::Configure);
        let vocab_size = c.u32()?;
        let k = c.u32()?;
        let weight = c.f64()?;
        let gamma = c.u32()?;
        let code = c.u8()?;
        let strategy =
            Strategy::from_code(code).ok_or_else(|| c.malformed(format!("unknown strategy {code}")))?;
        let seed_material = c.u64()?;
        c.finish()?;
        Ok(Self {
            vocab_size,
            k,
            weight,
            gamma,
            strategy,
            seed_material,
        })
    }
}

/// Draft tokens for one block, preceded by the tokens the worker's prefix
/// mirror is missing. `reset` clears the mirror first (a new generation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftBroadcast {
    pub reset: bool,
    pub delta: Vec<TokenId>,
    pub draft: Vec<TokenId>,
}

impl DraftBroadcast {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * (self.delta.len() + self.draft.len()));
        out.push(u8::from(self.reset));
        put_tokens(&mut out, &self.delta);
        put_tokens(&mut out, &self.draft);
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, FrameError> {
        let mut c = Cursor::new(body, MessageKind::DraftBroadcast);
        let reset = match c.u8()? {
            0 => false,
            1 => true,
            other => return Err(c.malformed(format!("reset flag {other}"))),
        };
        let delta = c.tokens()?;
        let draft = c.tokens()?;
        c.finish()?;
        Ok(Self { reset, delta, draft })
    }
}

/// γ+1 encoded top-K payloads plus a checksum of the worker's prefix mirror.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreBatch {
    pub checksum: u64,
    pub payloads: Vec<Vec<u8>>,
}

impl ScoreBatch {
    pub fn encoded_len_for(payload_lens: impl IntoIterator<Item = usize>) -> usize {
        8 + 4 + payload_lens.into_iter().map(|l| 4 + l).sum::<usize>()
    }

    pub fn encoded_len(&self) -> usize {
        Self::encoded_len_for(self.payloads.iter().map(Vec::len))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out.extend_from_slice(&(self.payloads.len() as u32).to_le_bytes());
        for p in &self.payloads {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(p);
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, FrameError> {
        let mut c = Cursor::new(body, MessageKind::ScoresUpload);
        let checksum = c.u64()?;
        let count = c.u32()? as usize;
        let mut payloads = Vec::new();
        for _ in 0..count {
            let len = c.u32()? as usize;
            payloads.push(c.take(len)?.to_vec());
        }
        c.finish()?;
        Ok(Self { checksum, payloads })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitNotice {
    pub tokens: Vec<TokenId>,
}

impl CommitNotice {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.tokens.len());
        put_tokens(&mut out, &self.tokens);
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, FrameError> {
        let mut c = Cursor::new(body, MessageKind::CommitNotice);
        let tokens = c.tokens()?;
        c.finish()?;
        Ok(Self { tokens })
    }
}

pub fn error_body(reason: &str) -> Vec<u8> {
    reason.as_bytes().to_vec()
}

pub fn error_reason(body: &[u8]) -> Result<String, FrameError> {
    String::from_utf8(body.to_vec()).map_err(|_| FrameError::MalformedBody {
        kind: MessageKind::Error.name(),
        reason: "reason is not UTF-8".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::Strategy;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as _;

    #[test]
    fn shutdown_frame_is_thirteen_bytes() {
        let m = Message::new(MessageKind::Shutdown, 9, Vec::new());
        let bytes = encode_frame(&m);
        assert_eq!(bytes.len(), 13);
        assert_eq!(decode_frame(&bytes).unwrap(), (m, 13));
    }

    #[test]
    fn oversize_and_unknown_kind() {
        let mut bytes = encode_frame(&Message::new(MessageKind::Hello, 1, vec![0, 1]));
        bytes[0..4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_frame(&bytes), Err(FrameError::Oversize(n)) if n == u32::MAX as u64));
        assert!(matches!(read_frame(&mut bytes.as_slice()), Err(FrameError::Oversize(_))));

        let mut bytes = encode_frame(&Message::new(MessageKind::Hello, 1, vec![0, 1]));
        bytes[4] = 7;
        assert!(matches!(decode_frame(&bytes), Err(FrameError::UnknownKind(7))));
    }

    #[test]
    fn truncated_streams() {
        let bytes = encode_frame(&Message::new(MessageKind::Error, 3, error_body("boom")));
        assert!(matches!(decode_frame(&bytes[..5]), Err(FrameError::Truncated { .. })));
        assert!(matches!(decode_frame(&bytes[..15]), Err(FrameError::Truncated { .. })));
        assert!(matches!(read_frame(&mut &bytes[..15]), Err(FrameError::Truncated { .. })));
        assert!(matches!(read_frame(&mut &bytes[..0]), Err(FrameError::Closed)));
    }

    #[test]
    fn reads_back_to_back_frames() {
        let a = Message::new(MessageKind::Hello, 1, Hello { protocol_version: 1 }.encode());
        let b = Message::new(MessageKind::Shutdown, 2, Vec::new());
        let mut stream = encode_frame(&a);
        stream.extend(encode_frame(&b));
        let mut r = stream.as_slice();
        assert_eq!(read_frame(&mut r).unwrap(), a);
        assert_eq!(read_frame(&mut r).unwrap(), b);
        assert!(matches!(read_frame(&mut r), Err(FrameError::Closed)));
    }

    #[test]
    fn body_roundtrips() {
        let cfg = Configure {
            vocab_size: 512,
            k: 8,
            weight: 0.5,
            gamma: 4,
            strategy: Strategy::ResidualUniform,
            seed_material: 77,
        };
        assert_eq!(cfg.encode().len(), Configure::ENCODED_LEN);
        assert_eq!(Configure::decode(&cfg.encode()).unwrap(), cfg);
        let mut bad = cfg.encode();
        bad[20] = 9;
        assert!(Configure::decode(&bad).is_err());

        let db = DraftBroadcast {
            reset: true,
            delta: vec![TokenId(1), TokenId(2)],
            draft: vec![TokenId(3)],
        };
        assert_eq!(DraftBroadcast::decode(&db.encode()).unwrap(), db);

        let batch = ScoreBatch {
            checksum: 0xdead_beef,
            payloads: vec![vec![1, 2, 3], vec![]],
        };
        assert_eq!(batch.encode().len(), batch.encoded_len());
        assert_eq!(ScoreBatch::decode(&batch.encode()).unwrap(), batch);

        let cn = CommitNotice { tokens: vec![TokenId(9)] };
        assert_eq!(CommitNotice::decode(&cn.encode()).unwrap(), cn);
        let mut long = cn.encode();
        long.push(0);
        assert!(CommitNotice::decode(&long).is_err());

        assert_eq!(error_reason(&error_body("not configured")).unwrap(), "not configured");
        assert!(error_reason(&[0xff, 0xfe]).is_err());
    }

    fn message() -> impl proptest::strategy::Strategy<Value = Message> {
        (0u8..7, any::<u64>(), prop::collection::vec(any::<u8>(), 0..256)).prop_map(|(k, id, body)| {
            Message::new(MessageKind::from_u8(k).unwrap(), id, body)
        })
    }

    proptest! {
        #[test]
        fn frame_roundtrip(m in message()) {
            let bytes = encode_frame(&m);
            prop_assert_eq!(bytes.len(), m.frame_len());
            prop_assert_eq!(decode_frame(&bytes).unwrap(), (m.clone(), bytes.len()));
            prop_assert_eq!(read_frame(&mut bytes.as_slice()).unwrap(), m);
        }

        #[test]
        fn body_decoders_never_panic(kind in 0u8..7, body in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = match MessageKind::from_u8(kind).unwrap() {
                MessageKind::Hello => Hello::decode(&body).map(|_| ()),
                MessageKind::Configure => Configure::decode(&body).map(|_| ()),
                MessageKind::DraftBroadcast => DraftBroadcast::decode(&body).map(|_| ()),
                MessageKind::ScoresUpload => ScoreBatch::decode(&body).map(|_| ()),
                MessageKind::CommitNotice => CommitNotice::decode(&body).map(|_| ()),
                MessageKind::Shutdown => Ok(()),
                MessageKind::Error => error_reason(&body).map(|_| ()),
            };
        }
    }
}
