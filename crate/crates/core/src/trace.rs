//! Per-evaluation training metrics shared by every trainer.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub train_loss: f64,
    pub train_acc: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub objective: f64,
    pub kkt_residual: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub rows: Vec<MetricsRow>,
    /// Set when the objective became non-finite and the run was stopped.
    pub truncated: bool,
}

impl MetricsTrace {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn train_acc(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.train_acc.map(|a| (r.iter, a))).collect()
    }

    pub fn test_acc(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.test_acc.map(|a| (r.iter, a))).collect()
    }

    /// CSV with the fixed column schema
    /// `iter,train_loss,train_acc,test_loss,test_acc,objective,kkt_residual,seconds`.
    /// Missing values are written as empty fields.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> crate::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(METRICS_COLUMNS)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.rows {
            out.write_record([
                r.iter.to_string(),
                format!("{:e}", r.train_loss),
                opt(r.train_acc),
                opt(r.test_loss),
                opt(r.test_acc),
                format!("{:e}", r.objective),
                opt(r.kkt_residual),
                format!("{:.6}", r.seconds),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub const METRICS_COLUMNS: [&str; 8] =
    ["iter", "train_loss", "train_acc", "test_loss", "test_acc", "objective", "kkt_residual", "seconds"];
