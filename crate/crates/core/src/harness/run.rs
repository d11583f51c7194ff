//! Single-seed training runs and their on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{ExperimentConfig, ModelFamily, ModelSpec, TaskConfig, Variant};
use crate::convex::{
    self, attention_importance, count_parameters, dataset_masks, sample_gates, AttentionImportance, Checkpoint,
    ConvexParams, ConvexVariant, GateBank, ModelKind, OutputVariant, ParamCount,
};
use crate::data::{split_dataset, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nonconvex::{self, Formulation, TrainConfig};
use crate::recovery::{self, Equivalence, KktReport};
use crate::solver::{self, Problem};
use crate::stack::{self, StackConfig};
use crate::tasks::{self, GrokkingMetrics, ModularTaskSpec};
use crate::trace::{MetricsRow, MetricsTrace};

/// Train/test data of one seed, plus the ground-truth importance of teacher tasks.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub truth: Option<AttentionImportance>,
}

fn nonempty(d: Dataset) -> Option<Dataset> {
    (!d.is_empty()).then_some(d)
}

fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    if fraction >= 1.0 {
        return Ok((data.clone(), None));
    }
    let (tr, te) = split_dataset(data, fraction, seed)?;
    Ok((tr, nonempty(te)))
}

pub fn build_task(task: &TaskConfig, seed: u64) -> Result<TaskData> {
    match task {
        TaskConfig::ModularDivision { p, allow_composite, train_fraction, split_seed } => {
            let spec = ModularTaskSpec {
                allow_composite: *allow_composite,
                train_fraction: *train_fraction,
                seed: split_seed.unwrap_or(seed),
                ..ModularTaskSpec::new(*p)
            };
            let data = tasks::gen_modular_division(&spec)?;
            let (train, test) = split(&data, *train_fraction, spec.seed)?;
            Ok(TaskData { train, test, truth: None })
        }
        TaskConfig::SyntheticTeacher { n, d, c, heads, samples, teacher_seed, train_fraction, split_seed } => {
            let (data, truth) = tasks::gen_synthetic_teacher(*n, *d, *c, *heads, *samples, teacher_seed.unwrap_or(seed))?;
            let (train, test) = split(&data, *train_fraction, split_seed.unwrap_or(seed))?;
            Ok(TaskData { train, test, truth: Some(truth) })
        }
        TaskConfig::DatasetFile { path, test_path, train_fraction, split_seed } => {
            let data = Dataset::load(path)?;
            match test_path {
                Some(tp) => Ok(TaskData { train: data, test: nonempty(Dataset::load(tp)?), truth: None }),
                None => {
                    let (train, test) = split(&data, *train_fraction, split_seed.unwrap_or(seed))?;
                    Ok(TaskData { train, test, truth: None })
                }
            }
        }
    }
}

/// Model spec with every optional field filled in from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedModel {
    pub spec: ModelSpec,
    pub variant: Variant,
    pub loss: LossKind,
    pub gates: usize,
    pub heads: usize,
}

pub fn resolve_model(spec: &ModelSpec, train: &Dataset) -> Result<ResolvedModel> {
    let loss = spec.loss.unwrap_or(if train.is_classification() { LossKind::CrossEntropy } else { LossKind::Squared });
    let variant = spec.variant.unwrap_or(if train.c() == 1 { Variant::Scalar } else { Variant::Vector });
    if variant == Variant::Scalar && train.c() != 1 {
        return Err(Error::domain(format!("scalar variant needs c = 1, the task has c = {}", train.c())));
    }
    let budget = recovery::head_budget(train.len(), train.n())?;
    Ok(ResolvedModel {
        variant,
        loss,
        gates: spec.gates.unwrap_or(budget),
        heads: spec.heads.unwrap_or(budget),
        spec: spec.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub tol: f64,
    pub residual: f64,
    pub max_inactive_violation: f64,
    pub max_active_alignment_error: f64,
    pub passes: bool,
}

impl CertificateSummary {
    pub(crate) fn new(report: &KktReport, tol: f64) -> Self {
        CertificateSummary {
            tol,
            residual: report.residual(),
            max_inactive_violation: report.max_inactive_violation,
            max_active_alignment_error: report.max_active_alignment_error,
            passes: report.passes(tol),
        }
    }
}

/// Everything a run reports besides its metrics trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub final_metrics: Option<MetricsRow>,
    pub grokking: Option<GrokkingMetrics>,
    pub certificate: Option<CertificateSummary>,
    pub equivalence: Option<Equivalence>,
    /// Entries actually trained.
    pub trained_parameters: usize,
    /// Reference counts of the three model families at the run's shapes.
    pub parameter_counts: serde_json::Value,
    pub attention: Option<AttentionImportance>,
    pub truncated: bool,
    pub iterations: usize,
    pub converged: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub trace: MetricsTrace,
    /// Convex single-layer model, for verification and attention export.
    pub checkpoint: Option<Checkpoint>,
    /// Serialized model of the other families.
    pub model_json: Option<serde_json::Value>,
}

fn output_variant(v: Variant) -> OutputVariant {
    match v {
        Variant::Scalar => OutputVariant::Scalar,
        Variant::Vector => OutputVariant::Multi,
        Variant::Fcn => OutputVariant::MultiFcn,
    }
}

fn reference_counts(data: &Dataset, m: &ResolvedModel) -> Result<serde_json::Value> {
    let (n, d, c) = (data.n() as u64, data.d() as u64, data.c() as u64);
    let v = output_variant(m.variant);
    let count = |kind, h: usize| count_parameters(n, d, h as u64, c, kind, v);
    let row = |p: ParamCount| json!({"params": p.params, "flops_order": p.flops_order});
    Ok(json!({
        "nonconvex_standard": row(count(ModelKind::NonconvexStandard, m.heads)?),
        "nonconvex_alternative": row(count(ModelKind::NonconvexAlternative, m.heads)?),
        "convex": row(count(ModelKind::Convex, m.gates)?),
    }))
}

fn grokking(trace: &MetricsTrace, threshold: f64) -> Option<GrokkingMetrics> {
    tasks::grokking_metrics(&trace.train_acc(), &trace.test_acc(), threshold).ok()
}

/// Train one model on one seed.
pub fn run_model(config: &ExperimentConfig, spec: &ModelSpec, seed: u64) -> Result<RunOutcome> {
    let data = build_task(&config.task, seed)?;
    run_on(config, spec, seed, &data)
}

pub fn run_on(config: &ExperimentConfig, spec: &ModelSpec, seed: u64, data: &TaskData) -> Result<RunOutcome> {
    let m = resolve_model(spec, &data.train)?;
    let resolved = json!({
        "task": config.task,
        "model": m,
        "seed": seed,
        "eval_interval": config.eval_interval,
        "threshold": config.threshold,
        "tol": config.tol,
    });
    let stop = spec.trainer.stop_at_threshold.then_some(config.threshold);
    let train = &data.train;
    let test = data.test.as_ref();
    let mut summary = RunSummary {
        model: spec.label(),
        seed,
        config: resolved.clone(),
        final_metrics: None,
        grokking: None,
        certificate: None,
        equivalence: None,
        trained_parameters: 0,
        parameter_counts: reference_counts(train, &m)?,
        attention: None,
        truncated: false,
        iterations: 0,
        converged: None,
    };
    let (trace, checkpoint, model_json) = match (spec.kind, spec.layers) {
        (ModelFamily::Convex, 1) => {
            let (params, trace, gate_seed, report) = run_convex(config, &m, seed, train, test)?;
            let masks = match gate_seed {
                Some(s) => Some(dataset_masks(&sample_gates(s, m.gates, train.n(), train.d())?, train)?),
                None => None,
            };
            if spec.beta > 0.0 {
                let kkt = recovery::kkt_certificate(&params, train, spec.beta, m.loss, masks.as_deref())?;
                summary.certificate = Some(CertificateSummary::new(&kkt, config.tol));
            }
            if params.variant != ConvexVariant::Fcn {
                summary.equivalence = Some(recovery::verify_equivalence(&params, train, spec.beta, m.loss)?);
            }
            summary.attention = Some(attention_importance(&params));
            summary.trained_parameters = params.num_parameters();
            summary.iterations = report.iterations;
            summary.converged = Some(report.converged);
            let mut cp = Checkpoint::new(&params, gate_seed);
            cp.beta = Some(spec.beta);
            cp.loss = Some(m.loss);
            cp.config = Some(resolved);
            (trace, Some(cp), None)
        }
        (ModelFamily::Convex, layers) => {
            let sc = StackConfig {
                layers,
                width: spec.width,
                gates: spec.gates.unwrap_or(StackConfig::default().gates),
                steps: spec.trainer.steps,
                lr: spec.trainer.lr,
                beta: spec.beta,
                loss: m.loss,
                seed,
                eval_interval: config.eval_interval,
                stop_at_test_acc: stop,
            };
            let (model, trace) = stack::train_stack(train, test, &sc)?;
            summary.trained_parameters = model.num_parameters();
            summary.iterations = trace.last().map_or(0, |r| r.iter);
            (trace, None, Some(json!({"config": resolved, "stack": model})))
        }
        (family, layers) => {
            let formulation = match (family, m.variant) {
                (ModelFamily::NonconvexStandard, _) if spec.attention_only => Formulation::AttentionOnly,
                (ModelFamily::NonconvexStandard, _) => Formulation::StandardBlocks,
                (_, Variant::Scalar) => Formulation::AltScalar,
                (_, Variant::Vector) => Formulation::AltVector,
                (_, Variant::Fcn) => Formulation::AltFcn,
            };
            let tc = TrainConfig {
                steps: spec.trainer.steps,
                lr: spec.trainer.lr,
                seed,
                optimizer: spec.trainer.optimizer,
                eval_interval: config.eval_interval,
                beta: spec.beta,
                loss: m.loss,
                heads: m.heads,
                layers,
                hidden: spec.width,
                stop_at_test_acc: stop,
            };
            let gates = match formulation {
                Formulation::AltFcn => Some(sample_gates(seed, m.heads, train.n(), train.d())?),
                _ => None,
            };
            let (params, trace) = nonconvex::train_nonconvex(train, test, formulation, &tc, gates.as_ref())?;
            summary.trained_parameters = params.num_parameters();
            summary.iterations = trace.last().map_or(0, |r| r.iter);
            (trace, None, Some(json!({"config": resolved, "formulation": formulation, "params": params})))
        }
    };
    summary.final_metrics = trace.last().cloned();
    summary.grokking = grokking(&trace, config.threshold);
    summary.truncated = trace.truncated;
    Ok(RunOutcome { summary, trace, checkpoint, model_json })
}

type ConvexRun = (ConvexParams, MetricsTrace, Option<u64>, solver::SolveReport);

fn run_convex(
    config: &ExperimentConfig,
    m: &ResolvedModel,
    seed: u64,
    train: &Dataset,
    test: Option<&Dataset>,
) -> Result<ConvexRun> {
    let (variant, gates): (ConvexVariant, Option<GateBank>) = match m.variant {
        Variant::Scalar => (ConvexVariant::Scalar, None),
        Variant::Vector => (ConvexVariant::Vector, None),
        Variant::Fcn => (ConvexVariant::Fcn, Some(sample_gates(seed, m.gates, train.n(), train.d())?)),
    };
    let masks = gates.as_ref().map(|g| dataset_masks(g, train)).transpose()?;
    let test_masks = match (&gates, test) {
        (Some(g), Some(t)) => Some(dataset_masks(g, t)?),
        _ => None,
    };
    let init = ConvexParams::zeros_for(variant, train, gates.as_ref().map_or(1, |g| g.len()))?;
    let problem = Problem { data: train, beta: m.spec.beta, kind: m.loss, masks: masks.as_deref() };
    let mut solve_config = m.spec.solver.clone();
    solve_config.eval_interval = config.eval_interval;
    solve_config.seed = seed;
    let mut trace = MetricsTrace::default();
    let (params, report) = solver::solve_observed(&init, &problem, &solve_config, |cp, z| {
        let eval = |data: &Dataset, masks: Option<&Vec<Vec<bool>>>| {
            nonconvex::evaluate(data, m.loss, |i, x| {
                convex::convex_forward(z, x, masks.map(|m| m[i].as_slice())).unwrap_or_default()
            })
        };
        let (train_loss, train_acc) = eval(train, masks.as_ref());
        let (test_loss, test_acc) = match test {
            Some(t) => {
                let (l, a) = eval(t, test_masks.as_ref());
                (Some(l), a)
            }
            None => (None, None),
        };
        trace.rows.push(MetricsRow {
            iter: cp.iter,
            train_loss,
            train_acc,
            test_loss,
            test_acc,
            objective: cp.objective,
            kkt_residual: Some(cp.kkt_residual),
            seconds: cp.seconds,
        });
    })?;
    trace.truncated = report.diverged;
    Ok((params, trace, gates.map(|g| g.seed), report))
}

/// Directory of one model/seed pair under `out`.
pub fn run_dir(out: &Path, label: &str, seed: u64) -> PathBuf {
    out.join(label).join(format!("seed_{seed}"))
}

/// Write metrics, summary, model and data artifacts of a run.
pub fn write_artifacts(dir: &Path, outcome: &RunOutcome, data: &TaskData) -> Result<()> {
    fs::create_dir_all(dir)?;
    outcome.trace.write_csv(fs::File::create(dir.join("metrics.csv"))?)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&outcome.summary.config)?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&outcome.summary)?)?;
    if let Some(cp) = &outcome.checkpoint {
        cp.save(dir.join("checkpoint.json"))?;
    }
    if let Some(model) = &outcome.model_json {
        fs::write(dir.join("model.json"), serde_json::to_string(model)?)?;
    }
    data.train.save(dir.join("train.json"))?;
    if let Some(t) = &data.test {
        t.save(dir.join("test.json"))?;
    }
    Ok(())
}

/// `cli run`: every seed of the config's model, in parallel, with artifacts.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Vec<RunSummary>> {
    use rayon::prelude::*;
    let spec = config
        .model
        .as_ref()
        .ok_or_else(|| Error::Config { line: 0, msg: "the config has no [model] section".into() })?;
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            let data = build_task(&config.task, seed)?;
            let outcome = run_on(config, spec, seed, &data)?;
            write_artifacts(&run_dir(out, &spec.label(), seed), &outcome, &data)?;
            Ok(outcome.summary)
        })
        .collect()
}
