use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedsd_core::experiment::{
    self, connect_workers, format_transcript, load_traces, record_traces, rescore_traces, run_with_pool,
    save_traces, worker_factory, Mode, RunConfig,
};
use fedsd_core::metrics::write_csv;
use fedsd_core::transport::worker_serve;
use fedsd_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser)]
#[command(name = "fedsd", version, about = "Federated speculative decoding simulator with top-K compressed uplinks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

macro_rules! overrides {
    ($($field:ident),* $(,)?) => {
        /// Configuration file plus per-key overrides.
        #[derive(Args, Debug, Clone, Default)]
        struct ConfigArgs {
            /// Configuration file of `key = value` lines.
            #[arg(long)]
            config: Option<PathBuf>,
            $(
                #[arg(long = stringify!($field), value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl ConfigArgs {
            fn pairs(&self) -> Vec<(&'static str, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.clone()));
                    }
                )*
                out
            }
        }
    };
}

overrides!(
    vocab_size,
    workers,
    weights,
    gamma,
    k,
    strategy,
    temperature,
    provider,
    concentration,
    correlation,
    corpus,
    markov_order,
    smoothing,
    model_seed,
    seed,
    max_tokens,
    samples,
    mode,
    prompt,
    eos,
    endpoints,
    timeout_ms,
    k_values,
    temperatures,
);

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for (key, value) in self.pairs() {
            config.set(key, &value)?;
        }
        Ok(config)
    }

    /// The same settings as command-line arguments, for child processes.
    fn to_args(&self) -> Vec<String> {
        let mut args = Vec::new();
        if let Some(path) = &self.config {
            args.push("--config".into());
            args.push(path.display().to_string());
        }
        for (key, value) in self.pairs() {
            args.push(format!("--{key}"));
            args.push(value);
        }
        args
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Decode `samples` generations and report transcripts and bound checks.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the transcript here instead of stdout.
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Write the CSV row here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Evaluate every K in `k_values` and temperature in `temperatures`.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a worker that serves server connections until told to shut down.
    ServeWorker {
        #[command(flatten)]
        config: ConfigArgs,
        /// Address to listen on; port 0 picks a free port.
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
    },
    /// Spawn local worker processes, decode over TCP and compare with an
    /// in-process rerun.
    LaunchDemo {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Record draft and worker distributions of the uncompressed trajectory.
    TraceRecord {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory receiving draft.sftr and worker<i>.sftr.
        #[arg(long)]
        dir: PathBuf,
    },
    /// Evaluate recorded traces for every K in `k_values`.
    TraceReplay {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dir: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn violation_exit(violations: usize) -> ExitCode {
    if violations == 0 {
        ExitCode::SUCCESS
    } else {
        eprintln!("{violations} bound violation(s)");
        ExitCode::from(EXIT_VIOLATION)
    }
}

fn cmd_run(config: &RunConfig, transcript: Option<&Path>, csv: Option<&Path>) -> Result<ExitCode> {
    let report = experiment::run(config)?;
    emit(transcript, &report.transcript())?;
    if let Some(record) = &report.record {
        emit(csv, &write_csv(std::slice::from_ref(record)))?;
    }
    let rate = report.accepted as f64 / report.examined.max(1) as f64;
    eprintln!(
        "{} blocks, {} of {} draft tokens accepted ({rate:.4}); uplink bytes per worker: {:?}",
        report.blocks, report.accepted, report.examined, report.uplink_bytes
    );
    Ok(violation_exit(report.violations()))
}

fn cmd_sweep(config: &RunConfig, out: Option<&Path>) -> Result<ExitCode> {
    let report = experiment::sweep(config)?;
    emit(out, &write_csv(&report.records))?;
    eprint!("{}", report.summary());
    Ok(violation_exit(report.violations()))
}

fn cmd_serve_worker(mut config: RunConfig, listen: &str) -> Result<ExitCode> {
    // endpoints belong to the server side
    config.mode = Mode::InProcess;
    config.validate()?;
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    let factory = worker_factory(config);
    worker_serve(&listener, &factory, |e| eprintln!("connection failed: {e}"))?;
    Ok(ExitCode::SUCCESS)
}

struct Workers(Vec<Child>);

impl Drop for Workers {
    fn drop(&mut self) {
        for c in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn spawn_worker(args: &ConfigArgs) -> Result<(Child, String)> {
    let exe = std::env::current_exe()?;
    let mut child = Command::new(exe)
        .arg("serve-worker")
        .args(args.to_args())
        .args(["--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .context("spawning worker process")?;
    let stdout = child.stdout.take().expect("stdout is piped");
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line)?;
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| anyhow!("worker did not report its address (got {line:?})"))?
        .to_string();
    Ok((child, addr))
}

fn cmd_launch_demo(args: &ConfigArgs) -> Result<ExitCode> {
    let mut config = args.load()?;
    config.mode = Mode::Networked;
    config.endpoints = vec![String::new(); config.workers];
    config.validate()?;

    let mut children = Workers(Vec::new());
    let mut endpoints = Vec::new();
    for _ in 0..config.workers {
        let (child, addr) = spawn_worker(args)?;
        children.0.push(child);
        endpoints.push(addr);
    }
    config.endpoints = endpoints;
    println!("workers: {}", config.endpoints.join(", "));

    let mut pool = connect_workers(&config)?;
    let networked = run_with_pool(&config, &mut pool);
    pool.shutdown();
    let networked = networked?;
    for c in &mut children.0 {
        c.wait()?;
    }

    let mut local = config.clone();
    local.mode = Mode::InProcess;
    let in_process = experiment::run(&local)?;

    print!("{}", format_transcript(&networked.transcripts));
    let per_worker_dense = networked.dense_bytes;
    for (i, bytes) in networked.uplink_bytes.iter().enumerate() {
        println!(
            "worker {i}: uplink {bytes} bytes compressed, {per_worker_dense} bytes dense ({:.4} of dense)",
            *bytes as f64 / per_worker_dense as f64
        );
    }
    if networked.transcripts != in_process.transcripts {
        bail!("networked transcript differs from the in-process rerun");
    }
    if networked.uplink_bytes != in_process.uplink_bytes {
        bail!(
            "measured uplink bytes {:?} differ from computed {:?}",
            networked.uplink_bytes,
            in_process.uplink_bytes
        );
    }
    println!("networked and in-process transcripts match");
    Ok(ExitCode::SUCCESS)
}

fn cmd_trace_record(config: &RunConfig, dir: &Path) -> Result<ExitCode> {
    let traces = record_traces(config)?;
    for path in save_traces(dir, &traces)? {
        println!("{}", path.display());
    }
    eprintln!("{} steps recorded", traces.draft.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_trace_replay(config: &RunConfig, dir: &Path, out: Option<&Path>) -> Result<ExitCode> {
    let traces = load_traces(dir, config.workers)?;
    let rows = rescore_traces(config, &traces)?;
    emit(out, &write_csv(&rows))?;
    Ok(violation_exit(rows.iter().map(|r| r.violations.total()).sum()))
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Run {
            config,
            transcript,
            csv,
        } => cmd_run(&config.load()?, transcript.as_deref(), csv.as_deref()),
        Cmd::Sweep { config, out } => cmd_sweep(&config.load()?, out.as_deref()),
        Cmd::ServeWorker { config, listen } => cmd_serve_worker(config.load()?, &listen),
        Cmd::LaunchDemo { config } => cmd_launch_demo(&config),
        Cmd::TraceRecord { config, dir } => cmd_trace_record(&config.load()?, &dir),
        Cmd::TraceReplay { config, dir, out } => cmd_trace_replay(&config.load()?, &dir, out.as_deref()),
    }
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<Error>(),
        Some(Error::Config(_) | Error::InvalidParameter(_))
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
