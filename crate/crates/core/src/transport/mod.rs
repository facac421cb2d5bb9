//! TCP transport between the server and its workers.

pub mod message;
pub mod server;
pub mod worker;

pub use message::{
    decode_frame, encode_frame, read_frame, write_frame, CommitNotice, Configure, DraftBroadcast,
    Hello, Message, MessageKind, ScoreBatch, FRAME_HEADER_LEN, MAX_FRAME_BODY, PROTOCOL_VERSION,
};
pub use server::{RemoteWorkers, WorkerSetup, DEFAULT_TIMEOUT};
pub use worker::{serve_connection, worker_serve, ConnectionEnd, ModelFactory};
