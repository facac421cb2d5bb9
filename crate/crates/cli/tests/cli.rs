use std::fs;
use std::net::TcpListener;
use std::process::{Command, Output};

fn fedsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsd")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const SMALL: [&str; 6] = ["--vocab_size", "64", "--samples", "2", "--max_tokens", "16"];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&SMALL);
    v
}

#[test]
fn run_is_deterministic() {
    let args = with_small(&["run", "--k", "4"]);
    let first = fedsd(&args);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    let out = stdout(&first);
    assert!(out.contains("sample 0 seed 42:"));
    assert!(out.contains("strategy,M,gamma,vocab_size,K,K_pct"));
    assert_eq!(out, stdout(&fedsd(&args)));
}

#[test]
fn full_k_has_no_bias() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("row.csv");
    let o = fedsd(&with_small(&["run", "--k", "full", "--csv", csv.to_str().unwrap()]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(csv).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[4], "64");
    for field in &row[10..15] {
        assert_eq!(field.parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn invalid_config_is_a_usage_error() {
    for args in [
        vec!["run", "--k", "9999", "--vocab_size", "64"],
        vec!["run", "--gamma", "0"],
        vec!["run", "--weights", "0.9,0.9"],
        vec!["run", "--config", "/nonexistent/fedsd.conf"],
    ] {
        let o = fedsd(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    fs::write(&path, "vocab_size = 64\nno_such_key = 1\n").unwrap();
    let o = fedsd(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    fs::write(&path, "# small run\nvocab_size = 64\nsamples = 1\nmax_tokens = 8\nk = 4\n").unwrap();
    let o = fedsd(&["run", "--config", path.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("sample 0 seed 7:"));
}

#[test]
fn sweep_emits_every_combination() {
    let o = fedsd(&["sweep", "--vocab_size", "64", "--samples", "2", "--max_tokens", "16", "--k_values", "1,4,16,64"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1 + 4 * 3 * 2);
    assert!(out.lines().skip(1).all(|l| l.ends_with(",0,0,0")));
}

#[test]
fn launch_demo_matches_in_process() {
    let o = fedsd(&with_small(&["launch-demo", "--k", "8"]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("networked and in-process transcripts match"), "{out}");
    assert_eq!(out.lines().filter(|l| l.contains("bytes dense")).count(), 2);
}

#[test]
fn unreachable_endpoint_is_reported() {
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
    let o = fedsd(&with_small(&[
        "run",
        "--mode",
        "networked",
        "--workers",
        "1",
        "--endpoints",
        &addr,
        "--timeout_ms",
        "500",
    ]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(&addr), "{}", stderr(&o));
}

#[test]
fn traces_replay_like_a_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let rec = fedsd(&with_small(&["trace-record", "--dir", d]));
    assert_eq!(rec.status.code(), Some(0), "{}", stderr(&rec));
    assert!(dir.path().join("draft.sftr").exists());
    assert!(dir.path().join("worker1.sftr").exists());

    let replay = fedsd(&with_small(&["trace-replay", "--dir", d, "--k_values", "4,64"]));
    assert_eq!(replay.status.code(), Some(0), "{}", stderr(&replay));
    let out = stdout(&replay);
    assert_eq!(out.lines().count(), 1 + 2 * 2);
    let full: Vec<&str> = out.lines().filter(|l| l.split(',').nth(4) == Some("64")).collect();
    assert_eq!(full.len(), 2);
    for row in full {
        assert_eq!(row.split(',').nth(10).unwrap().parse::<f64>().unwrap(), 0.0);
    }
}
