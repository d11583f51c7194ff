//! Experiment configuration files (TOML, or the equivalent JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nonconvex::Optimizer;
use crate::solver::{Algorithm, SolveConfig, StepRule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskConfig {
    ModularDivision {
        p: u64,
        #[serde(default)]
        allow_composite: bool,
        #[serde(default = "half")]
        train_fraction: f64,
        /// Split seed; the run seed when absent.
        #[serde(default)]
        split_seed: Option<u64>,
    },
    SyntheticTeacher {
        n: usize,
        d: usize,
        c: usize,
        heads: usize,
        samples: usize,
        /// Teacher seed; the run seed when absent.
        #[serde(default)]
        teacher_seed: Option<u64>,
        #[serde(default = "four_fifths")]
        train_fraction: f64,
        #[serde(default)]
        split_seed: Option<u64>,
    },
    DatasetFile {
        path: PathBuf,
        /// Held-out file; when absent the main file is split.
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default = "one")]
        train_fraction: f64,
        #[serde(default)]
        split_seed: Option<u64>,
    },
}

fn half() -> f64 {
    0.5
}

fn four_fifths() -> f64 {
    0.8
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Convex,
    NonconvexStandard,
    NonconvexAlternative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Scalar,
    Vector,
    Fcn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSpec {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Stop once train and test accuracy reach the experiment threshold.
    pub stop_at_threshold: bool,
}

impl Default for TrainerSpec {
    fn default() -> Self {
        TrainerSpec { steps: 1000, lr: 1e-3, optimizer: Optimizer::Adam, stop_at_threshold: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub kind: ModelFamily,
    /// Output structure; inferred from the task when absent.
    #[serde(default)]
    pub variant: Option<Variant>,
    #[serde(default = "one_layer")]
    pub layers: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Loss; cross-entropy for class targets and squared otherwise when absent.
    #[serde(default)]
    pub loss: Option<LossKind>,
    /// Gates of the FCN variants; the head budget `min(n, N+1)` when absent.
    #[serde(default)]
    pub gates: Option<usize>,
    /// Heads of the simplex attention model; the head budget when absent.
    #[serde(default)]
    pub heads: Option<usize>,
    /// Hidden width of stacks and feed-forward layers; 0 keeps `d`.
    #[serde(default)]
    pub width: usize,
    /// Use the attention-only network instead of full blocks.
    #[serde(default)]
    pub attention_only: bool,
    #[serde(default)]
    pub solver: SolveConfig,
    #[serde(default)]
    pub trainer: TrainerSpec,
}

fn one_layer() -> usize {
    1
}

fn default_beta() -> f64 {
    1e-3
}

impl ModelSpec {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let kind = match self.kind {
                ModelFamily::Convex => "convex",
                ModelFamily::NonconvexStandard => "standard",
                ModelFamily::NonconvexAlternative => "alternative",
            };
            format!("{kind}_L{}", self.layers)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    /// Model of `run`.
    #[serde(default)]
    pub model: Option<ModelSpec>,
    /// Models compared by `grokking-bench`.
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_eval")]
    pub eval_interval: usize,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    /// Accuracy threshold of the grokking metrics.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Certificate tolerance reported in summaries.
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_eval() -> usize {
    50
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_threshold() -> f64 {
    0.99
}

fn default_tol() -> f64 {
    1e-6
}

/// 1-based line of byte `offset` in `src`.
fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// First line assigning `key`, for pointing validation errors at the source.
fn line_of_key(src: &str, key: &str) -> usize {
    src.lines()
        .position(|l| {
            let t = l.trim_start().trim_start_matches('"');
            t.starts_with(key) && t[key.len()..].trim_start().trim_start_matches('"').trim_start().starts_with(['=', ':'])
        })
        .map_or(0, |i| i + 1)
}

impl ExperimentConfig {
    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(src: &str) -> Result<Self> {
        let cfg: ExperimentConfig = if src.trim_start().starts_with('{') {
            serde_json::from_str(src).map_err(|e| Error::Config { line: e.line(), msg: e.to_string() })?
        } else {
            toml::from_str(src).map_err(|e| Error::Config {
                line: e.span().map_or(0, |s| line_of(src, s.start)),
                msg: e.message().to_string(),
            })?
        };
        cfg.validate(src)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config { line: 0, msg: format!("cannot read {}: {e}", path.display()) })?;
        let mut cfg = Self::parse(&src)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")), &src)?;
        Ok(cfg)
    }

    /// Make dataset paths relative to the config file and check they exist.
    fn resolve_paths(&mut self, base: &Path, src: &str) -> Result<()> {
        if let TaskConfig::DatasetFile { path, test_path, .. } = &mut self.task {
            for (key, p) in [("path", Some(path)), ("test_path", test_path.as_mut())] {
                let Some(p) = p else { continue };
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.exists() {
                    return Err(Error::Config {
                        line: line_of_key(src, key),
                        msg: format!("dataset file {} does not exist", p.display()),
                    });
                }
            }
        }
        Ok(())
    }

    fn validate(&self, src: &str) -> Result<()> {
        let err = |key: &str, msg: String| Err(Error::Config { line: line_of_key(src, key), msg });
        if self.seeds.is_empty() {
            return err("seeds", "at least one seed is required".into());
        }
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return err("threshold", format!("threshold must be finite and >= 0, got {}", self.threshold));
        }
        if !(self.tol > 0.0) {
            return err("tol", format!("tol must be > 0, got {}", self.tol));
        }
        let fraction = match &self.task {
            TaskConfig::ModularDivision { train_fraction, .. }
            | TaskConfig::SyntheticTeacher { train_fraction, .. }
            | TaskConfig::DatasetFile { train_fraction, .. } => *train_fraction,
        };
        if !(fraction > 0.0 && fraction <= 1.0) {
            return err("train_fraction", format!("train_fraction must lie in (0, 1], got {fraction}"));
        }
        for m in self.model.iter().chain(&self.models) {
            if !(m.beta >= 0.0) {
                return err("beta", format!("beta must be >= 0, got {}", m.beta));
            }
            if m.layers == 0 {
                return err("layers", "layers must be >= 1".into());
            }
            if m.layers > 1 && m.kind == ModelFamily::NonconvexAlternative {
                return err("layers", "only convex stacks and the standard transformer take layers > 1".into());
            }
            if m.gates == Some(0) || m.heads == Some(0) {
                return err(if m.gates == Some(0) { "gates" } else { "heads" }, "counts must be >= 1".into());
            }
            if let Err(e) = m.solver.validate() {
                return err("solver", e.to_string());
            }
            if m.loss == Some(LossKind::CrossEntropy)
                && m.solver.step_rule == StepRule::LipschitzAuto
                && m.solver.algorithm != Algorithm::AdamSubgrad
            {
                return err("step_rule", "lipschitz_auto needs squared loss; use backtracking".into());
            }
            if !(m.trainer.lr > 0.0) {
                return err("lr", format!("learning rate must be > 0, got {}", m.trainer.lr));
            }
        }
        Ok(())
    }
}
