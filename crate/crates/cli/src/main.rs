use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use convex_attn::harness::{self, ExperimentConfig};
use convex_attn::convex::Checkpoint;
use convex_attn::data::Dataset;
use serde_json::json;

/// Convex and nonconvex attention training, certificates and benchmarks.
#[derive(Parser)]
#[command(name = "convex-attn", version)]
struct Cli {
    /// Worker threads; `CONVEX_ATTN_THREADS` takes precedence when set.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; override the config's `seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Certificate tolerance; overrides the config's `tol`.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the config's model on every seed and write artifacts.
    Run(RunArgs),
    /// Check the KKT certificate of a convex checkpoint.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the value stored in the checkpoint.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Write the token importance of a convex checkpoint as CSV.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare grokking metrics of the config's models.
    GrokkingBench(RunArgs),
    /// Write the train and test datasets of the config's task.
    GenDataset(RunArgs),
    /// Parameter counts of every model family at the given shapes.
    CountParams {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        d: u64,
        #[arg(long)]
        h: u64,
        #[arg(long)]
        c: u64,
    },
}

/// Failure that maps to a specific exit code.
enum Failure {
    /// Invalid config or input.
    Input(anyhow::Error),
    /// A check ran and did not pass.
    Check,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("invalid config {}", args.config.display()))?;
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(tol) = args.tol {
        cfg.tol = tol;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(args) => {
            let cfg = load_config(&args)?;
            let summaries = harness::run_experiment(&cfg, &cfg.output_dir)?;
            for s in &summaries {
                let last = s.final_metrics.as_ref();
                println!(
                    "{} seed {}: iter {} train_loss {:.6e} objective {:.6e}{}{}",
                    s.model,
                    s.seed,
                    last.map_or(0, |r| r.iter),
                    last.map_or(f64::NAN, |r| r.train_loss),
                    last.map_or(f64::NAN, |r| r.objective),
                    s.equivalence.as_ref().map_or(String::new(), |e| format!(" gap {:.3e}", e.gap)),
                    if s.truncated { " (truncated)" } else { "" },
                );
            }
            log::info!("artifacts written to {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Verify { checkpoint, dataset, beta, tol } => {
            let cp = Checkpoint::load(&checkpoint).with_context(|| format!("cannot load {}", checkpoint.display()))?;
            let data = Dataset::load(&dataset).with_context(|| format!("cannot load {}", dataset.display()))?;
            let report = harness::verify_checkpoint(&cp, &data, beta, None, tol)?;
            let violations: Vec<_> = report.kkt.per_row.iter().filter(|r| r.residual > tol).collect();
            let out = json!({
                "beta": report.beta,
                "loss": report.loss,
                "certificate": report.certificate,
                "equivalence": report.equivalence,
                "violations": violations,
            });
            println!("{}", serde_json::to_string_pretty(&out)?);
            if report.passes() {
                Ok(())
            } else {
                eprintln!("certificate fails: residual {:.3e} > tol {tol:.1e}", report.certificate.residual);
                Err(Failure::Check)
            }
        }
        Command::ExportAttention { checkpoint, out } => {
            let cp = Checkpoint::load(&checkpoint).with_context(|| format!("cannot load {}", checkpoint.display()))?;
            match out {
                Some(path) => harness::write_attention_csv(&cp, std::fs::File::create(path)?)?,
                None => harness::write_attention_csv(&cp, std::io::stdout().lock())?,
            }
            Ok(())
        }
        Command::GrokkingBench(args) => {
            let cfg = load_config(&args)?;
            let report = harness::grokking_bench(&cfg, Some(&cfg.output_dir))?;
            report.save(&cfg.output_dir)?;
            report.write_csv(std::io::stdout().lock())?;
            if let Some(c) = &report.comparison {
                println!("{}", serde_json::to_string_pretty(c)?);
            }
            Ok(())
        }
        Command::GenDataset(args) => {
            let cfg = load_config(&args)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            for &seed in &cfg.seeds {
                let data = harness::build_task(&cfg.task, seed)?;
                let train = cfg.output_dir.join(format!("train_seed_{seed}.json"));
                data.train.save(&train)?;
                if let Some(test) = &data.test {
                    test.save(cfg.output_dir.join(format!("test_seed_{seed}.json")))?;
                }
                if let Some(truth) = &data.truth {
                    write_json(&cfg.output_dir.join(format!("teacher_importance_seed_{seed}.json")), truth)?;
                }
                println!("{}: {} train samples", train.display(), data.train.len());
            }
            write_json(&cfg.output_dir.join("config.json"), &cfg)?;
            Ok(())
        }
        Command::CountParams { n, d, h, c } => {
            println!("model,variant,params,flops_order");
            for (kind, variant, count) in harness::parameter_table(n, d, h, c)? {
                let name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
                println!(
                    "{},{},{},\"{}\"",
                    name(serde_json::to_value(kind)?),
                    name(serde_json::to_value(variant)?),
                    count.params,
                    count.flops_order
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = std::env::var("CONVEX_ATTN_THREADS").ok().and_then(|v| v.parse().ok()).or(cli.threads);
    if let Some(t) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("cannot set thread count: {e}");
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
