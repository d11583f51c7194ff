//! Proximal solvers for the group-lasso convex programs.

use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::convex::{self, ConvexParams, ConvexVariant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nonconvex::Optimizer;
use crate::recovery;

/// Power-iteration steps of the Lipschitz estimate.
pub const POWER_ITERS: usize = 50;
/// Safety factor applied to the power-iteration estimate.
pub const LIPSCHITZ_SAFETY: f64 = 1.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    Fixed { eta: f64 },
    LipschitzAuto,
    Backtracking {
        #[serde(default = "default_shrink")]
        shrink: f64,
    },
}

fn default_shrink() -> f64 {
    0.5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ista,
    Fista,
    AdamSubgrad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    pub max_iters: usize,
    pub tol_kkt: f64,
    pub step_rule: StepRule,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub eval_interval: usize,
    /// Learning rate of `adam_subgrad`.
    pub lr: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            max_iters: 20_000,
            tol_kkt: 1e-9,
            step_rule: StepRule::Backtracking { shrink: 0.5 },
            algorithm: Algorithm::Fista,
            seed: 0,
            eval_interval: 50,
            lr: 1e-3,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_kkt > 0.0) {
            return Err(Error::domain("tol_kkt must be > 0"));
        }
        match self.step_rule {
            StepRule::Fixed { eta } if !(eta > 0.0 && eta.is_finite()) => {
                Err(Error::domain("fixed step must be positive and finite"))
            }
            StepRule::Backtracking { shrink } if !(shrink > 0.0 && shrink < 1.0) => {
                Err(Error::domain("backtracking shrink factor must lie in (0, 1)"))
            }
            _ if self.algorithm == Algorithm::AdamSubgrad && !(self.lr > 0.0) => {
                Err(Error::domain("adam learning rate must be > 0"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveCheckpoint {
    pub iter: usize,
    pub objective: f64,
    pub kkt_residual: f64,
    pub active_rows: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Objective after every iteration, starting with the initial point.
    pub objective: Vec<f64>,
    /// KKT residual after every iteration, starting with the initial point.
    pub kkt_residual: Vec<f64>,
    pub checkpoints: Vec<SolveCheckpoint>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub step: f64,
    pub seconds: f64,
}

impl SolveReport {
    pub fn final_objective(&self) -> f64 {
        self.objective.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_kkt(&self) -> f64 {
        self.kkt_residual.last().copied().unwrap_or(f64::NAN)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iter", "objective", "kkt_residual", "active_rows", "seconds"])?;
        for c in &self.checkpoints {
            out.write_record([
                c.iter.to_string(),
                c.objective.to_string(),
                c.kkt_residual.to_string(),
                c.active_rows.to_string(),
                c.seconds.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Summary without the per-iteration traces.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "iterations": self.iterations,
            "converged": self.converged,
            "diverged": self.diverged,
            "final_objective": self.final_objective(),
            "final_kkt_residual": self.final_kkt(),
            "step": self.step,
            "seconds": self.seconds,
            "active_rows": self.checkpoints.last().map(|c| c.active_rows),
        })
    }
}

/// Proximal map of `t ||.||_2`.
pub fn group_soft_threshold(row: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("threshold must be >= 0, got {t}")));
    }
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= t {
        return Ok(vec![0.0; row.len()]);
    }
    let s = 1.0 - t / norm;
    Ok(row.iter().map(|v| v * s).collect())
}

fn prox_in_place(params: &mut ConvexParams, t: f64) {
    for z in &mut params.z {
        for mut row in z.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm <= t {
                row.fill(0.0);
            } else {
                row *= 1.0 - t / norm;
            }
        }
    }
}

/// Gram matrix `K[i, i'] = sum_j m_ij m_i'j <X_i, X_i'>` of the design
/// operator mapping parameters to one output's predictions.
fn design_gram(data: &Dataset, masks: Option<&[Vec<bool>]>) -> ndarray::Array2<f64> {
    let n_samples = data.len();
    let mut k = ndarray::Array2::zeros((n_samples, n_samples));
    let s = data.samples();
    for a in 0..n_samples {
        for b in a..n_samples {
            let shared = match masks {
                Some(m) => m[a].iter().zip(&m[b]).filter(|(x, y)| **x && **y).count() as f64,
                None => 1.0,
            };
            if shared == 0.0 {
                continue;
            }
            let ip = ndarray::Zip::from(s[a].x.as_array())
                .and(s[b].x.as_array())
                .fold(0.0, |acc, x, y| acc + x * y);
            k[[a, b]] = shared * ip;
            k[[b, a]] = shared * ip;
        }
    }
    k
}

/// Upper estimate of the Lipschitz constant of the squared-loss gradient.
pub fn lipschitz_estimate(data: &Dataset, masks: Option<&[Vec<bool>]>, variant: ConvexVariant) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    if let Some(m) = masks {
        if m.len() != data.len() {
            return Err(Error::shape("one mask row per sample is required"));
        }
    }
    if variant == ConvexVariant::Fcn && masks.is_none() {
        return Err(Error::domain("FCN model needs gate masks"));
    }
    let masks = if variant == ConvexVariant::Fcn { masks } else { None };
    let k = design_gram(data, masks);
    let mut v = Array1::from_elem(data.len(), 1.0 / (data.len() as f64).sqrt());
    // A small tilt keeps the start vector off eigenvectors orthogonal to 1.
    for (i, x) in v.iter_mut().enumerate() {
        *x += 1e-3 * ((i as f64 + 1.0).sin());
    }
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let w = k.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        lambda = v.dot(&w) / v.dot(&v);
        v = w / norm;
    }
    let rayleigh = v.dot(&k.dot(&v));
    Ok(lambda.max(rayleigh) * LIPSCHITZ_SAFETY)
}

/// The convex program: data, regularization and optional gate masks.
pub struct Problem<'a> {
    pub data: &'a Dataset,
    pub beta: f64,
    pub kind: LossKind,
    pub masks: Option<&'a [Vec<bool>]>,
}

/// Minimize `sum_i L(f_Z(X_i), y_i) + beta * sum ||rows of Z||` from `init`.
pub fn solve(init: &ConvexParams, problem: &Problem, config: &SolveConfig) -> Result<(ConvexParams, SolveReport)> {
    solve_observed(init, problem, config, |_, _| {})
}

/// [`solve`] with a callback invoked at every recorded checkpoint.
pub fn solve_observed(
    init: &ConvexParams,
    problem: &Problem,
    config: &SolveConfig,
    mut observer: impl FnMut(&SolveCheckpoint, &ConvexParams),
) -> Result<(ConvexParams, SolveReport)> {
    config.validate()?;
    if !(problem.beta >= 0.0) {
        return Err(Error::domain(format!("beta must be >= 0, got {}", problem.beta)));
    }
    convex::smooth_grad(init, problem.data, problem.kind, problem.masks)?;
    let start = Instant::now();
    let Problem { data, beta, kind, masks } = *problem;
    let grad = |p: &ConvexParams| convex::grad_unchecked(p, data, kind, masks);

    let mut eta = match (config.algorithm, config.step_rule) {
        (Algorithm::AdamSubgrad, _) => config.lr,
        (_, StepRule::Fixed { eta }) => eta,
        (_, StepRule::LipschitzAuto) => {
            if kind != LossKind::Squared {
                return Err(Error::domain("lipschitz_auto needs squared loss; use backtracking"));
            }
            let l = lipschitz_estimate(data, masks, init.variant)?;
            if l > 0.0 { 1.0 / l } else { 1.0 }
        }
        (_, StepRule::Backtracking { .. }) => 1.0,
    };

    let mut report = SolveReport::default();
    let mut x = init.clone();
    let (mut fx_smooth, mut gx) = grad(&x);
    let mut fx = fx_smooth + beta * convex::group_lasso_penalty(&x);
    let mut kkt = recovery::kkt_residual_from_grad(&x, &gx, beta);
    let mut record = |report: &mut SolveReport, iter: usize, p: &ConvexParams, f: f64, r: f64, force: bool| {
        report.objective.push(f);
        report.kkt_residual.push(r);
        if force || iter % config.eval_interval.max(1) == 0 {
            let cp = SolveCheckpoint {
                iter,
                objective: f,
                kkt_residual: r,
                active_rows: p.nonzero_rows(0.0).len(),
                seconds: start.elapsed().as_secs_f64(),
            };
            observer(&cp, p);
            report.checkpoints.push(cp);
        }
    };
    record(&mut report, 0, &x, fx, kkt, true);
    if config.max_iters == 0 {
        report.step = eta;
        report.seconds = start.elapsed().as_secs_f64();
        return Ok((x, report));
    }
    if kkt <= config.tol_kkt {
        report.converged = true;
    }

    // FISTA state
    let mut y = x.clone();
    let (mut fy_smooth, mut gy) = (fx_smooth, gx.clone());
    let mut t = 1.0f64;
    // Adam state
    let mut adam = (config.algorithm == Algorithm::AdamSubgrad)
        .then(|| crate::nonconvex::AdamState::new(Optimizer::Adam, config.lr, &x.z));

    let mut iter = 0;
    while iter < config.max_iters && !report.converged {
        iter += 1;
        let next = match config.algorithm {
            Algorithm::AdamSubgrad => {
                let mut g = gx.clone();
                for (gz, z) in g.z.iter_mut().zip(&x.z) {
                    for (mut grow, zrow) in gz.rows_mut().into_iter().zip(z.rows()) {
                        let norm = zrow.dot(&zrow).sqrt();
                        if norm > 0.0 {
                            grow.scaled_add(beta / norm, &zrow);
                        }
                    }
                }
                let mut nx = x.clone();
                adam.as_mut().unwrap().step(&mut nx.z, &g.z);
                nx
            }
            Algorithm::Ista | Algorithm::Fista => {
                let (base, f_base, g_base) = if config.algorithm == Algorithm::Fista {
                    (&y, fy_smooth, &gy)
                } else {
                    (&x, fx_smooth, &gx)
                };
                loop {
                    let mut cand = base.clone();
                    cand.scaled_add(-eta, g_base);
                    prox_in_place(&mut cand, eta * beta);
                    let StepRule::Backtracking { shrink } = config.step_rule else {
                        break cand;
                    };
                    let f_cand = convex::data_fit_unchecked(&cand, data, kind, masks);
                    let diff = cand.combine(1.0, base, -1.0);
                    let lin: f64 = diff.z.iter().zip(&g_base.z).map(|(a, b)| (a * b).sum()).sum();
                    let sq: f64 = diff.z.iter().map(|a| a.iter().map(|v| v * v).sum::<f64>()).sum();
                    if !f_cand.is_finite() && eta < 1e-300 {
                        break cand;
                    }
                    if f_cand.is_finite() && f_cand <= f_base + lin + sq / (2.0 * eta) + 1e-12 * f_base.abs() {
                        break cand;
                    }
                    eta *= shrink;
                }
            }
        };
        let (f_next_smooth, g_next) = grad(&next);
        let f_next = f_next_smooth + beta * convex::group_lasso_penalty(&next);
        if !f_next.is_finite() {
            report.diverged = true;
            record(&mut report, iter, &x, fx, kkt, true);
            break;
        }
        if config.algorithm == Algorithm::Fista {
            // function-value restart: drop the momentum once the objective rises
            let momentum = if f_next > fx {
                t = 1.0;
                0.0
            } else {
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                let m = (t - 1.0) / t_next;
                t = t_next;
                m
            };
            if momentum == 0.0 {
                y = next.clone();
                fy_smooth = f_next_smooth;
                gy = g_next.clone();
            } else {
                y = next.combine(1.0 + momentum, &x, -momentum);
                (fy_smooth, gy) = grad(&y);
            }
        }
        x = next;
        fx_smooth = f_next_smooth;
        fx = f_next;
        gx = g_next;
        kkt = recovery::kkt_residual_from_grad(&x, &gx, beta);
        if kkt <= config.tol_kkt {
            report.converged = true;
        }
        let force = report.converged || iter == config.max_iters;
        record(&mut report, iter, &x, fx, kkt, force);
    }
    report.iterations = iter;
    report.step = eta;
    report.seconds = start.elapsed().as_secs_f64();
    Ok((x, report))
}
