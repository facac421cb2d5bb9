use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use fedsd_core::compression::{decode_payload, encode_payload, truncate_topk, Strategy};
use fedsd_core::dist::TokenId;
use fedsd_core::experiment::{connect_workers, local_workers, run_with_pool, worker_factory, worker_model, Mode, RunConfig};
use fedsd_core::models::{prefix_hash, ModelProvider};
use fedsd_core::transport::{
    read_frame, worker_serve, write_frame, CommitNotice, Configure, DraftBroadcast, Hello, Message, MessageKind,
    RemoteWorkers, ScoreBatch, WorkerSetup, PROTOCOL_VERSION,
};
use fedsd_core::Error;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.vocab_size = 64;
    c.k = fedsd_core::experiment::KSetting::Values(vec![4]);
    c.samples = 3;
    c.max_tokens = 24;
    c
}

/// Starts a worker thread serving `config`'s models on a free port.
fn spawn_worker(config: &RunConfig) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let config = config.clone();
    thread::spawn(move || {
        let factory = worker_factory(config);
        let _ = worker_serve(&listener, &factory, |_| {});
    });
    addr
}

fn configure(config: &RunConfig, worker: u64) -> Configure {
    Configure {
        vocab_size: config.vocab_size as u32,
        k: 4,
        weight: 0.5,
        gamma: config.gamma as u32,
        strategy: Strategy::Renormalized,
        seed_material: worker,
    }
}

fn send(stream: &mut TcpStream, kind: MessageKind, id: u64, body: Vec<u8>) {
    write_frame(stream, &Message::new(kind, id, body)).unwrap();
}

fn handshake(stream: &mut TcpStream, config: &RunConfig) {
    let hello = Hello {
        protocol_version: PROTOCOL_VERSION,
    };
    send(stream, MessageKind::Hello, 1, hello.encode());
    let reply = read_frame(stream).unwrap();
    assert_eq!((reply.kind, reply.correlation_id), (MessageKind::Hello, 1));
    let body = configure(config, 0).encode();
    send(stream, MessageKind::Configure, 2, body.clone());
    let reply = read_frame(stream).unwrap();
    assert_eq!(reply, Message::new(MessageKind::Configure, 2, body));
}

#[test]
fn draft_before_configure_is_refused() {
    let config = small_config();
    let mut stream = TcpStream::connect(spawn_worker(&config)).unwrap();
    let broadcast = DraftBroadcast {
        reset: true,
        delta: vec![TokenId(0)],
        draft: vec![TokenId(1); config.gamma],
    };
    send(&mut stream, MessageKind::DraftBroadcast, 1, broadcast.encode());
    let reply = read_frame(&mut stream).unwrap();
    assert_eq!(reply.kind, MessageKind::Error);
    assert_eq!(String::from_utf8(reply.body).unwrap(), "not configured");
    assert!(matches!(read_frame(&mut stream), Err(fedsd_core::FrameError::Closed)));
}

#[test]
fn scores_cover_every_position_and_mirror_the_prefix() {
    let config = small_config();
    let mut stream = TcpStream::connect(spawn_worker(&config)).unwrap();
    handshake(&mut stream, &config);
    let model = worker_model(&config, 0).unwrap();

    let draft: Vec<TokenId> = (10..10 + config.gamma as u32).map(TokenId).collect();
    let mut prefix = vec![TokenId(3)];
    let broadcast = DraftBroadcast {
        reset: true,
        delta: prefix.clone(),
        draft: draft.clone(),
    };
    send(&mut stream, MessageKind::DraftBroadcast, 3, broadcast.encode());
    let reply = read_frame(&mut stream).unwrap();
    assert_eq!((reply.kind, reply.correlation_id), (MessageKind::ScoresUpload, 3));
    let batch = ScoreBatch::decode(&reply.body).unwrap();
    assert_eq!(batch.checksum, prefix_hash(&prefix));
    assert_eq!(batch.payloads.len(), config.gamma + 1);
    for (t, bytes) in batch.payloads.iter().enumerate() {
        let mut context = prefix.clone();
        context.extend_from_slice(&draft[..t]);
        let expected = truncate_topk(&model.next_distribution(&context).unwrap(), 4).unwrap();
        assert_eq!(bytes, &encode_payload(&expected));
        assert_eq!(decode_payload(bytes).unwrap().k(), 4);
    }

    let committed = vec![TokenId(5), TokenId(6)];
    send(
        &mut stream,
        MessageKind::CommitNotice,
        4,
        CommitNotice {
            tokens: committed.clone(),
        }
        .encode(),
    );
    prefix.extend_from_slice(&committed);
    let next = DraftBroadcast {
        reset: false,
        delta: Vec::new(),
        draft,
    };
    send(&mut stream, MessageKind::DraftBroadcast, 5, next.encode());
    let batch = ScoreBatch::decode(&read_frame(&mut stream).unwrap().body).unwrap();
    assert_eq!(batch.checksum, prefix_hash(&prefix));
}

#[test]
fn stale_correlation_id_is_an_error() {
    let config = small_config();
    let mut stream = TcpStream::connect(spawn_worker(&config)).unwrap();
    handshake(&mut stream, &config);
    send(&mut stream, MessageKind::CommitNotice, 2, CommitNotice { tokens: vec![] }.encode());
    let reply = read_frame(&mut stream).unwrap();
    assert_eq!(reply.kind, MessageKind::Error);
}

#[test]
fn wrong_gamma_is_an_error() {
    let config = small_config();
    let mut stream = TcpStream::connect(spawn_worker(&config)).unwrap();
    handshake(&mut stream, &config);
    let broadcast = DraftBroadcast {
        reset: true,
        delta: vec![TokenId(0)],
        draft: vec![TokenId(1)],
    };
    send(&mut stream, MessageKind::DraftBroadcast, 3, broadcast.encode());
    assert_eq!(read_frame(&mut stream).unwrap().kind, MessageKind::Error);
}

fn networked(config: &RunConfig, addrs: &[SocketAddr]) -> RunConfig {
    let mut c = config.clone();
    c.mode = Mode::Networked;
    c.endpoints = addrs.iter().map(|a| a.to_string()).collect();
    c
}

#[test]
fn networked_run_matches_in_process() {
    for workers in [1, 2] {
        let mut config = small_config();
        config.workers = workers;
        config.mode = Mode::InProcess;
        let addrs: Vec<_> = (0..workers).map(|_| spawn_worker(&config)).collect();
        let remote_config = networked(&config, &addrs);
        let mut remote = connect_workers(&remote_config).unwrap();
        let over_tcp = run_with_pool(&remote_config, &mut remote).unwrap();
        remote.shutdown();
        let local = run_with_pool(&config, &mut local_workers(&config).unwrap()).unwrap();
        assert_eq!(over_tcp.transcript(), local.transcript());
        assert_eq!(over_tcp.uplink_bytes, local.uplink_bytes);
    }
}

/// Handshakes like a worker, then misbehaves on the first broadcast.
fn spawn_faulty_worker(hang: bool) -> SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        for _ in 0..2 {
            let m = read_frame(&mut stream).unwrap();
            write_frame(&mut stream, &m).unwrap();
        }
        let _ = read_frame(&mut stream);
        if hang {
            thread::sleep(Duration::from_secs(5));
        }
        let _ = stream.flush();
    });
    addr
}

fn setups(addrs: &[SocketAddr]) -> Vec<WorkerSetup> {
    addrs
        .iter()
        .enumerate()
        .map(|(i, a)| WorkerSetup {
            endpoint: a.to_string(),
            k: 4,
            weight: 0.5,
            seed_material: i as u64,
        })
        .collect()
}

#[test]
fn failed_worker_is_named() {
    let config = small_config();
    for hang in [false, true] {
        let addrs = [spawn_worker(&config), spawn_faulty_worker(hang)];
        let timeout = Duration::from_millis(300);
        let mut pool =
            RemoteWorkers::connect(&setups(&addrs), config.vocab_size, config.gamma, Strategy::Renormalized, timeout)
                .unwrap();
        let mut c = networked(&config, &addrs);
        c.samples = 1;
        let start = Instant::now();
        let err = run_with_pool(&c, &mut pool).unwrap_err();
        assert!(start.elapsed() < Duration::from_secs(3), "took {:?}", start.elapsed());
        match err {
            Error::Worker { worker, endpoint, .. } => {
                assert_eq!(worker, 1);
                assert_eq!(endpoint, addrs[1].to_string());
            }
            other => panic!("unexpected error {other}"),
        }
    }
}

#[test]
fn unreachable_worker_is_named() {
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let err = RemoteWorkers::connect(&setups(&[addr]), 64, 4, Strategy::Renormalized, Duration::from_millis(500))
        .err()
        .expect("nothing listens there");
    assert!(err.to_string().contains(&addr.to_string()), "{err}");
}

#[test]
fn worker_rejects_configure_with_other_vocabulary() {
    let config = small_config();
    let addr = spawn_worker(&config);
    let err = RemoteWorkers::connect(&setups(&[addr]), 32, 4, Strategy::Renormalized, Duration::from_secs(2))
        .err()
        .expect("vocabulary mismatch");
    assert!(matches!(err, Error::Worker { worker: 0, .. }), "{err}");
}
