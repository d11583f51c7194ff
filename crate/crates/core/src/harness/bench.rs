//! Side-by-side grokking comparison of several models on one task.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelFamily};
use super::run::{build_task, run_dir, run_on, write_artifacts, TaskData};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    /// Seed, or `None` on a median row.
    pub seed: Option<u64>,
    pub iters_to_train_thresh: Option<f64>,
    pub iters_to_test_thresh: Option<f64>,
    pub grokking_gap: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub final_test_acc: Option<f64>,
    pub truncated: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub convex: String,
    pub nonconvex: String,
    /// Every run of both models reached the train threshold.
    pub both_fit_train: bool,
    /// Convex median iterations to the test threshold over the nonconvex one.
    pub test_iters_ratio: Option<f64>,
    pub convex_faster: bool,
    pub convex_smaller_gap: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub threshold: f64,
    pub config: ExperimentConfig,
    pub rows: Vec<BenchRow>,
    pub medians: Vec<BenchRow>,
    pub comparison: Option<Comparison>,
}

/// Median where `None` means "never reached" and sorts above every number.
/// The result is `None` when the median position falls on a censored run.
pub fn censored_median(values: &[Option<f64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let k = v.len();
    let m = if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) };
    m.is_finite().then_some(m)
}

/// `a < b` with `None` as infinity; two censored values are not ordered.
fn censored_lt(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a < b,
        (Some(_), None) => true,
        _ => false,
    }
}

fn median_row(model: &str, rows: &[&BenchRow]) -> BenchRow {
    let med = |f: fn(&BenchRow) -> Option<f64>| censored_median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
    BenchRow {
        model: model.to_string(),
        seed: None,
        iters_to_train_thresh: med(|r| r.iters_to_train_thresh),
        iters_to_test_thresh: med(|r| r.iters_to_test_thresh),
        grokking_gap: med(|r| r.grokking_gap),
        final_train_acc: med(|r| r.final_train_acc),
        final_test_acc: med(|r| r.final_test_acc),
        truncated: rows.iter().any(|r| r.truncated),
        seconds: rows.iter().map(|r| r.seconds).sum(),
    }
}

fn compare(config: &ExperimentConfig, rows: &[BenchRow], medians: &[BenchRow]) -> Option<Comparison> {
    let convex = config.models.iter().find(|m| m.kind == ModelFamily::Convex)?.label();
    let nonconvex = config.models.iter().find(|m| m.kind != ModelFamily::Convex)?.label();
    let med = |name: &str| medians.iter().find(|r| r.model == name);
    let (c, n) = (med(&convex)?, med(&nonconvex)?);
    let both_fit_train = rows
        .iter()
        .filter(|r| r.model == convex || r.model == nonconvex)
        .all(|r| r.iters_to_train_thresh.is_some());
    let test_iters_ratio = match (c.iters_to_test_thresh, n.iters_to_test_thresh) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        (Some(_), None) => Some(0.0),
        _ => None,
    };
    Some(Comparison {
        convex,
        nonconvex,
        both_fit_train,
        test_iters_ratio,
        convex_faster: test_iters_ratio.is_some_and(|r| r <= 0.5),
        convex_smaller_gap: censored_lt(c.grokking_gap, n.grokking_gap),
    })
}

/// Run every model on every seed, writing run artifacts under `out` when
/// given, and aggregate the grokking metrics.
pub fn grokking_bench(config: &ExperimentConfig, out: Option<&Path>) -> Result<BenchReport> {
    let has = |convex: bool| config.models.iter().any(|m| (m.kind == ModelFamily::Convex) == convex);
    if !has(true) || !has(false) {
        return Err(Error::Config { line: 0, msg: "the bench needs a convex and a nonconvex entry in [[models]]".into() });
    }
    let data: Vec<(u64, TaskData)> =
        config.seeds.par_iter().map(|&s| Ok((s, build_task(&config.task, s)?))).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> =
        (0..config.models.len()).flat_map(|m| (0..data.len()).map(move |s| (m, s))).collect();
    let rows: Vec<BenchRow> = jobs
        .par_iter()
        .map(|&(mi, si)| {
            let spec = &config.models[mi];
            let (seed, task) = &data[si];
            let outcome = run_on(config, spec, *seed, task)?;
            if let Some(out) = out {
                write_artifacts(&run_dir(out, &spec.label(), *seed), &outcome, task)?;
            }
            let s = &outcome.summary;
            let last = s.final_metrics.as_ref();
            let g = s.grokking.as_ref();
            Ok(BenchRow {
                model: s.model.clone(),
                seed: Some(*seed),
                iters_to_train_thresh: g.and_then(|g| g.iters_to_train_thresh).map(|v| v as f64),
                iters_to_test_thresh: g.and_then(|g| g.iters_to_test_thresh).map(|v| v as f64),
                grokking_gap: g.and_then(|g| g.grokking_gap).map(|v| v as f64),
                final_train_acc: last.and_then(|r| r.train_acc),
                final_test_acc: last.and_then(|r| r.test_acc),
                truncated: s.truncated,
                seconds: last.map_or(0.0, |r| r.seconds),
            })
        })
        .collect::<Result<_>>()?;
    let medians: Vec<BenchRow> = config
        .models
        .iter()
        .map(|m| {
            let label = m.label();
            median_row(&label, &rows.iter().filter(|r| r.model == label).collect::<Vec<_>>())
        })
        .collect();
    let comparison = compare(config, &rows, &medians);
    Ok(BenchReport { threshold: config.threshold, config: config.clone(), rows, medians, comparison })
}

pub const BENCH_COLUMNS: [&str; 9] = [
    "model",
    "seed",
    "iters_to_train_thresh",
    "iters_to_test_thresh",
    "grokking_gap",
    "final_train_acc",
    "final_test_acc",
    "truncated",
    "seconds",
];

impl BenchReport {
    /// Per-seed rows followed by one `median` row per model. Thresholds
    /// never reached are written as `none`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(BENCH_COLUMNS)?;
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        for r in self.rows.iter().chain(&self.medians) {
            out.write_record([
                r.model.clone(),
                r.seed.map_or("median".to_string(), |s| s.to_string()),
                opt(r.iters_to_train_thresh),
                opt(r.iters_to_test_thresh),
                opt(r.grokking_gap),
                opt(r.final_train_acc),
                opt(r.final_test_acc),
                r.truncated.to_string(),
                format!("{:.3}", r.seconds),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_csv(fs::File::create(dir.join("grokking_bench.csv"))?)?;
        fs::write(dir.join("grokking_bench.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn censored_medians() {
        assert_eq!(censored_median(&[Some(3.0), None, Some(1.0)]), Some(3.0));
        assert_eq!(censored_median(&[Some(3.0), None, None]), None);
        assert_eq!(censored_median(&[Some(3.0), Some(1.0)]), Some(2.0));
        assert_eq!(censored_median(&[Some(3.0), None]), None);
        assert_eq!(censored_median(&[Some(-4.0)]), Some(-4.0));
        assert_eq!(censored_median(&[]), None);
    }

    #[test]
    fn censored_order() {
        assert!(censored_lt(Some(1.0), None));
        assert!(!censored_lt(None, None));
        assert!(!censored_lt(None, Some(1.0)));
        assert!(!censored_lt(Some(2.0), Some(2.0)));
    }
}
