//! Configured experiment runs: single runs, sweeps over K and temperature,
//! and trace record/rescore.

mod config;
mod run;

pub use config::{KSetting, Mode, Provider, RunConfig, KEYS};
pub use run::{
    capture_metrics, connect_workers, draft_model, format_transcript, load_traces, local_workers,
    record_traces, reference_captures, reference_generation, rescore_traces, run, run_with_pool,
    sample_seed, save_traces, sweep, traces_from_captures, worker_factory, worker_model, worker_setups,
    MonotonicityCheck, RecordedTraces, RunReport, SampleTranscript, SweepReport,
};
