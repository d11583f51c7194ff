//! Checkpoint verification, attention export and parameter tables.

use serde::{Deserialize, Serialize};

use super::run::CertificateSummary;
use crate::convex::{attention_importance, count_parameters, dataset_masks, Checkpoint, ConvexVariant, ModelKind, OutputVariant, ParamCount};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, LossKind};
use crate::recovery::{self, Equivalence, KktReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub beta: f64,
    pub loss: LossKind,
    pub certificate: CertificateSummary,
    pub equivalence: Option<Equivalence>,
    pub kkt: KktReport,
}

impl VerifyReport {
    pub fn passes(&self) -> bool {
        self.certificate.passes
    }
}

/// KKT certificate and equivalence gap of a convex checkpoint on `data`.
/// `beta` and `loss` default to the values stored in the checkpoint.
pub fn verify_checkpoint(
    cp: &Checkpoint,
    data: &Dataset,
    beta: Option<f64>,
    loss: Option<LossKind>,
    tol: f64,
) -> Result<VerifyReport> {
    let params = cp.params()?;
    params.check_data(data)?;
    let beta = beta
        .or(cp.beta)
        .ok_or_else(|| Error::domain("beta is neither given nor stored in the checkpoint"))?;
    let loss = loss.or(cp.loss).unwrap_or(if data.is_classification() { LossKind::CrossEntropy } else { LossKind::Squared });
    losses::check_targets(data, loss)?;
    let masks = cp.gates()?.map(|g| dataset_masks(&g, data)).transpose()?;
    let kkt = recovery::kkt_certificate(&params, data, beta, loss, masks.as_deref())?;
    let equivalence = match params.variant {
        ConvexVariant::Fcn => None,
        _ => Some(recovery::verify_equivalence(&params, data, beta, loss)?),
    };
    Ok(VerifyReport { beta, loss, certificate: CertificateSummary::new(&kkt, tol), equivalence, kkt })
}

/// Plot-ready `token,raw,score` rows of a checkpoint's attention importance.
pub fn write_attention_csv<W: std::io::Write>(cp: &Checkpoint, w: W) -> Result<()> {
    let imp = attention_importance(&cp.params()?);
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["token", "raw", "score"])?;
    for (k, (r, s)) in imp.raw.iter().zip(&imp.scores).enumerate() {
        out.write_record([k.to_string(), format!("{r:e}"), format!("{s:e}")])?;
    }
    out.flush()?;
    Ok(())
}

/// Parameter counts of every model family and output variant. Pairs that do
/// not exist at these shapes (a scalar output with `c > 1`) are skipped.
pub fn parameter_table(n: u64, d: u64, h: u64, c: u64) -> Result<Vec<(ModelKind, OutputVariant, ParamCount)>> {
    let mut rows = Vec::new();
    for kind in [ModelKind::NonconvexStandard, ModelKind::NonconvexAlternative, ModelKind::Convex] {
        for variant in [OutputVariant::Scalar, OutputVariant::Multi, OutputVariant::MultiFcn] {
            if variant == OutputVariant::Scalar && c != 1 {
                continue;
            }
            rows.push((kind, variant, count_parameters(n, d, h, c, kind, variant)?));
        }
    }
    Ok(rows)
}
