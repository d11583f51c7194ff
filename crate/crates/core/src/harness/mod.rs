//! Config-driven experiment runner behind the command-line tool.

mod bench;
mod config;
mod run;
mod verify;

pub use bench::{censored_median, grokking_bench, BenchReport, BenchRow, Comparison, BENCH_COLUMNS};
pub use config::{ExperimentConfig, ModelFamily, ModelSpec, TaskConfig, TrainerSpec, Variant};
pub use run::{
    build_task, resolve_model, run_dir, run_experiment, run_model, run_on, write_artifacts, CertificateSummary,
    ResolvedModel, RunOutcome, RunSummary, TaskData,
};
pub use verify::{parameter_table, verify_checkpoint, write_attention_csv, VerifyReport};
