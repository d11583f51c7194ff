//! Maps between the convex and nonconvex formulations, optimality
//! certificates and the head budget.

use serde::{Deserialize, Serialize};

use crate::convex::{self, ConvexParams, ConvexVariant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::nonconvex::{self, AltAttnParams, AltHead, AltVariant, Formulation, NonconvexParams};

/// Relative tolerance below which a row counts as zero during recovery.
pub const PRUNE_REL_TOL: f64 = 1e-7;

/// `PRUNE_REL_TOL * (1 + max row norm)`.
pub fn prune_tol(z: &ConvexParams) -> f64 {
    PRUNE_REL_TOL * (1.0 + z.max_row_norm())
}

/// Rescale `(w2, w3)` so both factors carry the same norm. `w3` is a scalar
/// (length 1) or an output vector measured in the l1 norm.
pub fn balanced_rescale(w2: &[f64], w3: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n2 = w2.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n3 = w3.iter().map(|v| v.abs()).sum::<f64>();
    if n2 == 0.0 || n3 == 0.0 {
        return (w2.to_vec(), w3.to_vec());
    }
    let alpha = (n3 / n2).sqrt();
    (w2.iter().map(|v| v * alpha).collect(), w3.iter().map(|v| v / alpha).collect())
}

/// Build simplex-attention heads from a convex solution: one head per
/// nonzero row, `w1 = e_k`, `w2 = z/sqrt(||z||)`, `w3 = sqrt(||z||)` (times
/// `e_l` for vector outputs).
pub fn recover_nonconvex(z: &ConvexParams, variant: AltVariant, budget: usize) -> Result<AltAttnParams> {
    z.validate()?;
    match (z.variant, variant) {
        (ConvexVariant::Scalar, AltVariant::Scalar) | (ConvexVariant::Vector, AltVariant::Vector) => {}
        (ConvexVariant::Scalar, AltVariant::Vector) => {}
        _ => {
            return Err(Error::domain(format!(
                "cannot recover a {:?} attention model from a {:?} convex model",
                variant, z.variant
            )))
        }
    }
    let tol = prune_tol(z);
    let active = z.nonzero_rows(tol);
    if active.len() > budget {
        return Err(Error::HeadBudget { active: active.len(), budget });
    }
    let heads = active
        .into_iter()
        .map(|(j, l, k)| {
            let row = z.z(j, l).row(k);
            let norm = row.dot(&row).sqrt();
            let s = norm.sqrt();
            let mut w1 = vec![0.0; z.n];
            w1[k] = 1.0;
            let mut w3 = vec![0.0; z.c];
            w3[l] = s;
            AltHead { w1, w2: row.iter().map(|v| v / s).collect(), w3 }
        })
        .collect();
    Ok(AltAttnParams { variant, c: z.c, heads })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub convex_obj: f64,
    pub nonconvex_obj: f64,
    pub gap: f64,
    pub heads: usize,
}

/// Recover heads from `z` and compare the two objectives.
pub fn verify_equivalence(z: &ConvexParams, data: &Dataset, beta: f64, kind: LossKind) -> Result<Equivalence> {
    let (variant, formulation) = match z.variant {
        ConvexVariant::Scalar => (AltVariant::Scalar, Formulation::AltScalar),
        ConvexVariant::Vector => (AltVariant::Vector, Formulation::AltVector),
        ConvexVariant::Fcn => return Err(Error::domain("equivalence is checked for the scalar and vector models")),
    };
    let convex_obj = convex::convex_objective(z, data, beta, kind, None)?;
    let alt = recover_nonconvex(z, variant, z.n * z.c)?;
    let heads = alt.heads.len();
    let nonconvex_obj =
        nonconvex::nonconvex_objective(&NonconvexParams::Alt(alt), data, beta, kind, formulation, None)?;
    Ok(Equivalence { convex_obj, nonconvex_obj, gap: (convex_obj - nonconvex_obj).abs(), heads })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowKkt {
    pub gate: usize,
    pub output: usize,
    pub token: usize,
    pub active: bool,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Largest `max(||G_k|| - beta, 0)` over zero rows.
    pub max_inactive_violation: f64,
    /// Largest `||G_k + beta z_k/||z_k|| ||` over nonzero rows.
    pub max_active_alignment_error: f64,
    pub per_row: Vec<RowKkt>,
}

impl KktReport {
    pub fn residual(&self) -> f64 {
        self.max_inactive_violation.max(self.max_active_alignment_error)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.residual() <= tol
    }
}

fn kkt_rows(z: &ConvexParams, grad: &ConvexParams, beta: f64) -> KktReport {
    let mut report = KktReport { max_inactive_violation: 0.0, max_active_alignment_error: 0.0, per_row: Vec::new() };
    for (idx, (zm, gm)) in z.z.iter().zip(&grad.z).enumerate() {
        for (k, (zr, gr)) in zm.rows().into_iter().zip(gm.rows()).enumerate() {
            let zn = zr.dot(&zr).sqrt();
            let (active, residual) = if zn == 0.0 {
                (false, (gr.dot(&gr).sqrt() - beta).max(0.0))
            } else {
                let r = gr.iter().zip(zr).map(|(g, z)| (g + beta * z / zn).powi(2)).sum::<f64>().sqrt();
                (true, r)
            };
            if active {
                report.max_active_alignment_error = report.max_active_alignment_error.max(residual);
            } else {
                report.max_inactive_violation = report.max_inactive_violation.max(residual);
            }
            report.per_row.push(RowKkt { gate: idx / z.c, output: idx % z.c, token: k, active, residual });
        }
    }
    report
}

pub(crate) fn kkt_residual_from_grad(z: &ConvexParams, grad: &ConvexParams, beta: f64) -> f64 {
    let mut worst = 0.0f64;
    for (zm, gm) in z.z.iter().zip(&grad.z) {
        for (zr, gr) in zm.rows().into_iter().zip(gm.rows()) {
            let zn = zr.dot(&zr).sqrt();
            let r = if zn == 0.0 {
                (gr.dot(&gr).sqrt() - beta).max(0.0)
            } else {
                gr.iter().zip(zr).map(|(g, z)| (g + beta * z / zn).powi(2)).sum::<f64>().sqrt()
            };
            worst = worst.max(r);
        }
    }
    worst
}

/// Per-row stationarity of the group-lasso program at `z`. Rows that are
/// exactly zero are checked against the dual-norm bound, all others for
/// alignment with the penalty subgradient.
pub fn kkt_certificate(
    z: &ConvexParams,
    data: &Dataset,
    beta: f64,
    kind: LossKind,
    masks: Option<&[Vec<bool>]>,
) -> Result<KktReport> {
    if !(beta > 0.0) {
        return Err(Error::domain(format!("the certificate needs beta > 0, got {beta}")));
    }
    let grad = convex::smooth_grad(z, data, kind, masks)?;
    Ok(kkt_rows(z, &grad, beta))
}

/// Smallest `beta` at which `Z = 0` is optimal.
pub fn beta_shutoff(
    data: &Dataset,
    kind: LossKind,
    masks: Option<&[Vec<bool>]>,
    variant: ConvexVariant,
) -> Result<f64> {
    let h = match (variant, masks) {
        (ConvexVariant::Fcn, Some(m)) => m.first().map_or(1, |r| r.len()),
        _ => 1,
    };
    let zero = ConvexParams::zeros_for(variant, data, h)?;
    let grad = convex::smooth_grad(&zero, data, kind, masks)?;
    Ok(grad.row_norms().into_iter().flatten().fold(0.0, f64::max))
}

/// `min(n, N + 1)`.
pub fn head_budget(n_samples: usize, n: usize) -> Result<usize> {
    if n_samples == 0 || n == 0 {
        return Err(Error::domain("head budget needs N, n >= 1"));
    }
    Ok(n.min(n_samples + 1))
}
