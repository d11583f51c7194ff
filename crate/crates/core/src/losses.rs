//! Convex losses shared by the convex and nonconvex objectives.

use serde::{Deserialize, Serialize};

use crate::data::Target;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `1/2 ||prediction - target||^2`
    #[default]
    Squared,
    /// Max-shifted log-sum-exp minus the label logit.
    CrossEntropy,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Squared => "squared",
            LossKind::CrossEntropy => "cross_entropy",
        })
    }
}

fn check(kind: LossKind, prediction: &[f64], target: &Target) -> Result<()> {
    if prediction.iter().any(|p| !p.is_finite()) {
        return Err(Error::domain("non-finite prediction"));
    }
    match (kind, target) {
        (LossKind::Squared, Target::Class(_)) => Err(Error::domain("squared loss needs a real-valued target")),
        (LossKind::Squared, t) => {
            let y = t.values().unwrap_or_default();
            if y.len() != prediction.len() {
                return Err(Error::shape(format!("prediction arity {} != target arity {}", prediction.len(), y.len())));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain("non-finite target"));
            }
            Ok(())
        }
        (LossKind::CrossEntropy, Target::Class(label)) => {
            if *label >= prediction.len() {
                return Err(Error::domain(format!("label {label} out of range for {} logits", prediction.len())));
            }
            Ok(())
        }
        (LossKind::CrossEntropy, _) => Err(Error::domain("cross-entropy needs a class label")),
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn loss_value(kind: LossKind, prediction: &[f64], target: &Target) -> Result<f64> {
    check(kind, prediction, target)?;
    Ok(loss_value_unchecked(kind, prediction, target))
}

pub(crate) fn loss_value_unchecked(kind: LossKind, prediction: &[f64], target: &Target) -> f64 {
    match (kind, target) {
        (LossKind::CrossEntropy, Target::Class(label)) => log_sum_exp(prediction) - prediction[*label],
        (_, Target::Scalar(y)) => 0.5 * (prediction[0] - y).powi(2),
        (_, Target::Vector(y)) => 0.5 * prediction.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>(),
        (LossKind::Squared, Target::Class(_)) => unreachable!("rejected by check"),
    }
}

/// Gradient of the loss with respect to the prediction.
pub fn loss_grad(kind: LossKind, prediction: &[f64], target: &Target) -> Result<Vec<f64>> {
    check(kind, prediction, target)?;
    Ok(loss_grad_unchecked(kind, prediction, target))
}

pub(crate) fn loss_grad_unchecked(kind: LossKind, prediction: &[f64], target: &Target) -> Vec<f64> {
    match (kind, target) {
        (LossKind::CrossEntropy, Target::Class(label)) => {
            let lse = log_sum_exp(prediction);
            let mut g: Vec<f64> = prediction.iter().map(|p| (p - lse).exp()).collect();
            g[*label] -= 1.0;
            g
        }
        (_, Target::Scalar(y)) => vec![prediction[0] - y],
        (_, Target::Vector(y)) => prediction.iter().zip(y).map(|(p, t)| p - t).collect(),
        (LossKind::Squared, Target::Class(_)) => unreachable!("rejected by check"),
    }
}

/// Check every target of a dataset against the loss kind.
pub(crate) fn check_targets(data: &crate::data::Dataset, kind: LossKind) -> Result<()> {
    let zero = vec![0.0; data.c()];
    for s in data.samples() {
        check(kind, &zero, &s.target)?;
    }
    Ok(())
}

/// Argmax with ties broken towards the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
