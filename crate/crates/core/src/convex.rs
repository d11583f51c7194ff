//! Convex attention models: gate banks, the linear forward maps, group-lasso
//! objectives and gradients, attention-importance maps, parameter accounting
//! and checkpoints.

use std::path::Path;

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, TokenMatrix};
use crate::error::{Error, Result};
use crate::losses::{self, LossKind};
use crate::rng;

/// Samples per fixed-order reduction chunk.
const CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexVariant {
    /// One matrix `Z`, scalar prediction `trace(Z^T X)`.
    Scalar,
    /// One matrix per output.
    Vector,
    /// One matrix per (gate, output), combined through gate masks.
    Fcn,
}

/// Token-indexed weights of a convex model. Matrix `(j, l)` is stored at
/// index `j * c + l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexParams {
    pub variant: ConvexVariant,
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub h: usize,
    pub z: Vec<Array2<f64>>,
}

impl ConvexParams {
    pub fn zeros(variant: ConvexVariant, n: usize, d: usize, c: usize, h: usize) -> Result<Self> {
        if n == 0 || d == 0 || c == 0 || h == 0 {
            return Err(Error::domain("convex model dimensions must be positive"));
        }
        match variant {
            ConvexVariant::Scalar if c != 1 || h != 1 => {
                return Err(Error::domain("scalar convex model has c = h = 1"));
            }
            ConvexVariant::Vector if h != 1 => return Err(Error::domain("vector convex model has h = 1")),
            _ => {}
        }
        Ok(ConvexParams { variant, n, d, c, h, z: vec![Array2::zeros((n, d)); h * c] })
    }

    /// Zero parameters sized for a dataset.
    pub fn zeros_for(variant: ConvexVariant, data: &Dataset, h: usize) -> Result<Self> {
        let h = if variant == ConvexVariant::Fcn { h } else { 1 };
        Self::zeros(variant, data.n(), data.d(), data.c(), h)
    }

    pub fn z(&self, j: usize, l: usize) -> &Array2<f64> {
        &self.z[j * self.c + l]
    }

    pub fn z_mut(&mut self, j: usize, l: usize) -> &mut Array2<f64> {
        &mut self.z[j * self.c + l]
    }

    pub fn validate(&self) -> Result<()> {
        if self.z.len() != self.h * self.c {
            return Err(Error::shape(format!("expected {} matrices, found {}", self.h * self.c, self.z.len())));
        }
        if self.z.iter().any(|z| z.dim() != (self.n, self.d)) {
            return Err(Error::shape(format!("every Z must be {}x{}", self.n, self.d)));
        }
        if self.z.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::domain("convex parameters are not finite"));
        }
        Ok(())
    }

    pub(crate) fn check_data(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if data.n() != self.n || data.d() != self.d || data.c() != self.c {
            return Err(Error::shape(format!(
                "model is (n={}, d={}, c={}), dataset is (n={}, d={}, c={})",
                self.n,
                self.d,
                self.c,
                data.n(),
                data.d(),
                data.c()
            )));
        }
        Ok(())
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        ConvexParams { z: self.z.iter().map(|z| Array2::zeros(z.raw_dim())).collect(), ..self.clone() }
    }

    /// `self += a * other`.
    pub fn scaled_add(&mut self, a: f64, other: &ConvexParams) {
        for (z, o) in self.z.iter_mut().zip(&other.z) {
            z.scaled_add(a, o);
        }
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ConvexParams, b: f64) -> ConvexParams {
        let mut out = self.clone();
        for (z, o) in out.z.iter_mut().zip(&other.z) {
            Zip::from(z).and(o).for_each(|z, o| *z = a * *z + b * o);
        }
        out
    }

    /// Euclidean norm of every row, indexed `[j * c + l][k]`.
    pub fn row_norms(&self) -> Vec<Vec<f64>> {
        self.z.iter().map(|z| z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()).collect()
    }

    pub fn max_row_norm(&self) -> f64 {
        self.row_norms().into_iter().flatten().fold(0.0, f64::max)
    }

    /// Rows whose norm exceeds `tol`, as `(j, l, k)` triples.
    pub fn nonzero_rows(&self, tol: f64) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (idx, norms) in self.row_norms().into_iter().enumerate() {
            for (k, r) in norms.into_iter().enumerate() {
                if r > tol {
                    out.push((idx / self.c, idx % self.c, k));
                }
            }
        }
        out
    }

    /// Number of parameters actually stored (`n d c h`).
    pub fn num_parameters(&self) -> usize {
        self.n * self.d * self.c * self.h
    }
}

/// Fixed random gate vectors of the gated-ReLU convex model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateBank {
    pub seed: u64,
    pub u1: Vec<Vec<f64>>,
    pub u2: Vec<Vec<f64>>,
}

impl GateBank {
    pub fn len(&self) -> usize {
        self.u1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u1.is_empty()
    }
}

/// Draw `h` gates with standard normal entries; gate `j` comes from its own
/// stream keyed by `(seed, j)`.
pub fn sample_gates(seed: u64, h: usize, n: usize, d: usize) -> Result<GateBank> {
    if h == 0 || n == 0 || d == 0 {
        return Err(Error::domain("gate bank needs h, n, d >= 1"));
    }
    let mut u1 = Vec::with_capacity(h);
    let mut u2 = Vec::with_capacity(h);
    for j in 0..h {
        let mut g = rng::keyed(seed, rng::stream::GATES, j as u64);
        u1.push(rng::normal_vec(&mut g, n));
        u2.push(rng::normal_vec(&mut g, d));
    }
    Ok(GateBank { seed, u1, u2 })
}

/// `1[u1_j^T X u2_j >= 0]` for every gate.
pub fn gate_mask(bank: &GateBank, x: &TokenMatrix) -> Result<Vec<bool>> {
    if bank.u1.iter().any(|u| u.len() != x.rows()) || bank.u2.iter().any(|u| u.len() != x.cols()) {
        return Err(Error::shape(format!("gate bank does not match a {}x{} token matrix", x.rows(), x.cols())));
    }
    Ok(bank
        .u1
        .iter()
        .zip(&bank.u2)
        .map(|(u1, u2)| crate::nonconvex::head_score(x.as_array(), u1, u2) >= 0.0)
        .collect())
}

/// Gate masks of every sample in a dataset.
pub fn dataset_masks(bank: &GateBank, data: &Dataset) -> Result<Vec<Vec<bool>>> {
    data.samples().iter().map(|s| gate_mask(bank, &s.x)).collect()
}

fn frob_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, a, b| acc + a * b)
}

fn check_mask(params: &ConvexParams, mask: Option<&[bool]>) -> Result<()> {
    match (params.variant, mask) {
        (ConvexVariant::Fcn, Some(m)) if m.len() == params.h => Ok(()),
        (ConvexVariant::Fcn, Some(m)) => {
            Err(Error::shape(format!("{} mask bits for {} gates", m.len(), params.h)))
        }
        (ConvexVariant::Fcn, None) => Err(Error::domain("FCN model needs gate masks")),
        (_, Some(_)) => Err(Error::domain("only the FCN model takes gate masks")),
        (_, None) => Ok(()),
    }
}

pub(crate) fn forward_unchecked(params: &ConvexParams, x: &Array2<f64>, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; params.c];
    for j in 0..params.h {
        if mask.is_some_and(|m| !m[j]) {
            continue;
        }
        for (l, o) in out.iter_mut().enumerate() {
            *o += frob_dot(params.z(j, l), x);
        }
    }
    out
}

/// `sum_j 1_j sum_{k,m} Z_{jl}[k,m] X[k,m]` for every output `l`.
pub fn convex_forward(params: &ConvexParams, x: &TokenMatrix, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    params.validate()?;
    if x.rows() != params.n || x.cols() != params.d {
        return Err(Error::shape(format!(
            "model expects {}x{} tokens, got {}x{}",
            params.n,
            params.d,
            x.rows(),
            x.cols()
        )));
    }
    check_mask(params, mask)?;
    Ok(forward_unchecked(params, x.as_array(), mask))
}

/// Sum of the Euclidean norms of every row of every `Z`.
pub fn group_lasso_penalty(params: &ConvexParams) -> f64 {
    params.row_norms().into_iter().flatten().sum()
}

fn check_masks(params: &ConvexParams, data: &Dataset, masks: Option<&[Vec<bool>]>) -> Result<()> {
    params.check_data(data)?;
    match masks {
        Some(m) if m.len() != data.len() => {
            Err(Error::shape(format!("{} mask rows for {} samples", m.len(), data.len())))
        }
        Some(m) => m.iter().try_for_each(|row| check_mask(params, Some(row))),
        None => check_mask(params, None),
    }
}

/// Run `f` on every sample in fixed-size chunks and reduce in chunk order,
/// so the result does not depend on the number of worker threads.
fn chunked_sum<T, F, A>(samples: &[Sample], zero: impl Fn() -> T + Sync, f: F, add: A) -> T
where
    T: Send,
    F: Fn(usize, &Sample, &mut T) + Sync,
    A: Fn(&mut T, T),
{
    let parts: Vec<T> = samples
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = zero();
            for (off, s) in chunk.iter().enumerate() {
                f(ci * CHUNK + off, s, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = zero();
    for p in parts {
        add(&mut total, p);
    }
    total
}

pub(crate) fn data_fit_unchecked(params: &ConvexParams, data: &Dataset, kind: LossKind, masks: Option<&[Vec<bool>]>) -> f64 {
    chunked_sum(
        data.samples(),
        || 0.0,
        |i, s, acc| {
            let pred = forward_unchecked(params, s.x.as_array(), masks.map(|m| m[i].as_slice()));
            *acc += losses::loss_value_unchecked(kind, &pred, &s.target);
        },
        |a, b| *a += b,
    )
}

/// `sum_i L(prediction_i, y_i)` without the penalty. Targets are validated.
pub fn data_fit(params: &ConvexParams, data: &Dataset, kind: LossKind, masks: Option<&[Vec<bool>]>) -> Result<f64> {
    check_masks(params, data, masks)?;
    losses::check_targets(data, kind)?;
    Ok(data_fit_unchecked(params, data, kind, masks))
}

/// Data fit plus `beta` times the group-lasso penalty.
pub fn convex_objective(
    params: &ConvexParams,
    data: &Dataset,
    beta: f64,
    kind: LossKind,
    masks: Option<&[Vec<bool>]>,
) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::domain(format!("beta must be >= 0, got {beta}")));
    }
    Ok(data_fit(params, data, kind, masks)? + beta * group_lasso_penalty(params))
}

/// Gradient of the data fit at `params`, accumulated as
/// `sum_i 1_ij g_il X_i`; also returns the data-fit value.
pub(crate) fn grad_unchecked(
    params: &ConvexParams,
    data: &Dataset,
    kind: LossKind,
    masks: Option<&[Vec<bool>]>,
) -> (f64, ConvexParams) {
    let (loss, grad) = chunked_sum(
        data.samples(),
        || (0.0, params.zeros_like()),
        |i, s, (loss, grad)| {
            let mask = masks.map(|m| m[i].as_slice());
            let x = s.x.as_array();
            let pred = forward_unchecked(params, x, mask);
            *loss += losses::loss_value_unchecked(kind, &pred, &s.target);
            let g = losses::loss_grad_unchecked(kind, &pred, &s.target);
            for j in 0..params.h {
                if mask.is_some_and(|m| !m[j]) {
                    continue;
                }
                for (l, gl) in g.iter().enumerate() {
                    if *gl != 0.0 {
                        grad.z_mut(j, l).scaled_add(*gl, x);
                    }
                }
            }
        },
        |(la, ga), (lb, gb)| {
            *la += lb;
            ga.scaled_add(1.0, &gb);
        },
    );
    (loss, grad)
}

/// Gradient of the smooth data-fit term with the shape of `params`.
pub fn smooth_grad(
    params: &ConvexParams,
    data: &Dataset,
    kind: LossKind,
    masks: Option<&[Vec<bool>]>,
) -> Result<ConvexParams> {
    check_masks(params, data, masks)?;
    losses::check_targets(data, kind)?;
    Ok(grad_unchecked(params, data, kind, masks).1)
}

/// Per-token attention mass read off the row norms of `Z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionImportance {
    /// `sum_{j,l} ||z_jlk||` per token.
    pub raw: Vec<f64>,
    /// `raw` normalised to sum 1, or all zeros.
    pub scores: Vec<f64>,
}

impl AttentionImportance {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        let total: f64 = raw.iter().sum();
        let scores = if total > 0.0 { raw.iter().map(|r| r / total).collect() } else { vec![0.0; raw.len()] };
        AttentionImportance { raw, scores }
    }

    /// Total normalised mass on a set of tokens.
    pub fn mass_on(&self, tokens: &[usize]) -> f64 {
        tokens.iter().filter_map(|&k| self.scores.get(k)).sum()
    }

    /// Token indices sorted by decreasing score (ties by index).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|a, b| self.scores[*b].partial_cmp(&self.scores[*a]).unwrap().then(a.cmp(b)));
        idx
    }
}

pub fn attention_importance(params: &ConvexParams) -> AttentionImportance {
    let mut raw = vec![0.0; params.n];
    for norms in params.row_norms() {
        for (r, v) in raw.iter_mut().zip(norms) {
            *r += v;
        }
    }
    AttentionImportance::from_raw(raw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    NonconvexStandard,
    NonconvexAlternative,
    Convex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputVariant {
    Scalar,
    Multi,
    MultiFcn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub params: u64,
    /// Order of the per-sample forward cost.
    pub flops_order: String,
}

/// Parameter counts and forward-cost orders of the three model families.
pub fn count_parameters(
    n: u64,
    d: u64,
    h: u64,
    c: u64,
    model: ModelKind,
    variant: OutputVariant,
) -> Result<ParamCount> {
    if n == 0 || d == 0 || h == 0 || c == 0 {
        return Err(Error::domain("dimensions must be positive"));
    }
    if variant == OutputVariant::Scalar && c != 1 {
        return Err(Error::domain("scalar output needs c = 1"));
    }
    use ModelKind::*;
    use OutputVariant::*;
    let (params, flops) = match (model, variant) {
        (NonconvexStandard, Scalar) => (h * (3 * d * d + d), "O(h(n^2 d + n d^2))"),
        (NonconvexStandard, Multi | MultiFcn) => (h * (3 * d * d + d * c), "O(h(n^2 d + n d^2 + d c))"),
        (NonconvexAlternative, Scalar) => (h * (n + d + 1), "O(h n d)"),
        (NonconvexAlternative, Multi | MultiFcn) => (h * (n + d + c), "O(h(n d + c))"),
        (Convex, Scalar) => (n * d, "O(n d)"),
        (Convex, Multi) => (n * d * c, "O(n d c)"),
        (Convex, MultiFcn) => (n * d * c * h, "O(n d c h)"),
    };
    Ok(ParamCount { params, flops_order: flops.to_string() })
}

/// Serialized convex model: shapes, gate seed and row-major `Z` matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: ConvexVariant,
    pub n: usize,
    pub d: usize,
    pub c: usize,
    pub h: usize,
    pub gate_seed: Option<u64>,
    /// Regularization strength the model was trained with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossKind>,
    /// Matrix `(j, l)` at index `j * c + l`, each flattened row-major.
    pub z: Vec<Vec<f64>>,
    /// Resolved configuration that produced the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: &ConvexParams, gate_seed: Option<u64>) -> Self {
        Checkpoint {
            variant: params.variant,
            n: params.n,
            d: params.d,
            c: params.c,
            h: params.h,
            gate_seed,
            beta: None,
            loss: None,
            z: params.z.iter().map(|z| z.iter().copied().collect()).collect(),
            config: None,
        }
    }

    pub fn params(&self) -> Result<ConvexParams> {
        let mut p = ConvexParams::zeros(self.variant, self.n, self.d, self.c, self.h)?;
        if self.z.len() != p.z.len() {
            return Err(Error::shape(format!("checkpoint has {} matrices, expected {}", self.z.len(), p.z.len())));
        }
        for (dst, src) in p.z.iter_mut().zip(&self.z) {
            *dst = Array2::from_shape_vec((self.n, self.d), src.clone())
                .map_err(|_| Error::shape(format!("checkpoint matrix is not {}x{}", self.n, self.d)))?;
        }
        p.validate()?;
        if self.variant == ConvexVariant::Fcn && self.gate_seed.is_none() {
            return Err(Error::domain("FCN checkpoint needs a gate seed"));
        }
        Ok(p)
    }

    /// Regenerate the gate bank, if the model has one.
    pub fn gates(&self) -> Result<Option<GateBank>> {
        match (self.variant, self.gate_seed) {
            (ConvexVariant::Fcn, Some(seed)) => sample_gates(seed, self.h, self.n, self.d).map(Some),
            _ => Ok(None),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cp.params()?;
        Ok(cp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Target;
    use ndarray::array;

    fn tm(a: Array2<f64>) -> TokenMatrix {
        TokenMatrix::new(a).unwrap()
    }

    fn random_params(variant: ConvexVariant, n: usize, d: usize, c: usize, h: usize, seed: u64) -> ConvexParams {
        let mut p = ConvexParams::zeros(variant, n, d, c, h).unwrap();
        let mut g = rng::keyed(seed, 99, 0);
        for z in &mut p.z {
            z.iter_mut().for_each(|v| *v = rng::normal(&mut g));
        }
        p
    }

    #[test]
    fn gates_are_deterministic() {
        let a = sample_gates(5, 3, 4, 2).unwrap();
        assert_eq!(a, sample_gates(5, 3, 4, 2).unwrap());
        assert_ne!(a, sample_gates(6, 3, 4, 2).unwrap());
        let one = sample_gates(0, 1, 1, 1).unwrap();
        assert_eq!((one.u1[0].len(), one.u2[0].len()), (1, 1));
    }

    #[test]
    fn masks_of_zero_and_negated_inputs() {
        let bank = sample_gates(1, 6, 3, 2).unwrap();
        assert!(gate_mask(&bank, &TokenMatrix::zeros(3, 2)).unwrap().iter().all(|b| *b));
        let x = array![[1.0, -2.0], [0.5, 0.3], [-1.0, 2.0]];
        let m = gate_mask(&bank, &tm(x.clone())).unwrap();
        let neg = gate_mask(&bank, &tm(-x)).unwrap();
        for (a, b) in m.iter().zip(neg) {
            assert_ne!(*a, b);
        }
        assert!(gate_mask(&bank, &TokenMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn forward_examples() {
        let mut p = ConvexParams::zeros(ConvexVariant::Scalar, 2, 2, 1, 1).unwrap();
        let x = tm(array![[2.0, 3.0], [4.0, 5.0]]);
        assert_eq!(convex_forward(&p, &x, None).unwrap(), vec![0.0]);
        p.z[0][[0, 0]] = 1.0;
        assert_eq!(convex_forward(&p, &x, None).unwrap(), vec![2.0]);
        assert!(convex_forward(&p, &x, Some(&[true])).is_err());
    }

    #[test]
    fn penalty_and_importance_examples() {
        let mut p = ConvexParams::zeros(ConvexVariant::Scalar, 2, 2, 1, 1).unwrap();
        assert_eq!(group_lasso_penalty(&p), 0.0);
        assert_eq!(attention_importance(&p).scores, vec![0.0, 0.0]);
        p.z[0].row_mut(1).assign(&array![3.0, 4.0]);
        assert_eq!(group_lasso_penalty(&p), 5.0);
        assert_eq!(attention_importance(&p).scores, vec![0.0, 1.0]);
        p.z[0].row_mut(0).assign(&array![1.0, 0.0]);
        p.z[0].row_mut(1).assign(&array![0.0, 3.0]);
        assert_eq!(attention_importance(&p).scores, vec![0.25, 0.75]);
    }

    #[test]
    fn gradient_at_zero_is_minus_yx() {
        let x = tm(array![[1.0, 2.0], [3.0, -1.0]]);
        let data = Dataset::from_samples(vec![Sample::new(x.clone(), Target::Scalar(2.0))], None).unwrap();
        let p = ConvexParams::zeros_for(ConvexVariant::Scalar, &data, 1).unwrap();
        let g = smooth_grad(&p, &data, LossKind::Squared, None).unwrap();
        assert_eq!(g.z[0], x.as_array() * -2.0);
    }

    #[test]
    fn chunked_reduction_matches_serial_sum() {
        let mut samples = Vec::new();
        let mut g = rng::keyed(3, 0, 0);
        for _ in 0..(3 * CHUNK + 5) {
            let x = Array2::from_shape_vec((2, 3), rng::normal_vec(&mut g, 6)).unwrap();
            samples.push(Sample::new(tm(x), Target::Vector(rng::normal_vec(&mut g, 2))));
        }
        let data = Dataset::from_samples(samples, None).unwrap();
        let p = random_params(ConvexVariant::Vector, 2, 3, 2, 1, 1);
        let parallel = convex_objective(&p, &data, 0.0, LossKind::Squared, None).unwrap();
        let serial: f64 = data
            .samples()
            .iter()
            .map(|s| losses::loss_value(LossKind::Squared, &forward_unchecked(&p, s.x.as_array(), None), &s.target).unwrap())
            .sum();
        assert!((parallel - serial).abs() <= 1e-9 * serial.abs());
    }

    #[test]
    fn table_one_examples() {
        use ModelKind::*;
        use OutputVariant::*;
        assert_eq!(count_parameters(4, 8, 2, 1, NonconvexStandard, Scalar).unwrap().params, 400);
        assert_eq!(count_parameters(4, 8, 2, 1, NonconvexAlternative, Scalar).unwrap().params, 26);
        assert_eq!(count_parameters(4, 8, 2, 1, Convex, Scalar).unwrap().params, 32);
        assert!(count_parameters(4, 8, 2, 3, Convex, Scalar).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = random_params(ConvexVariant::Fcn, 3, 2, 2, 4, 9);
        let cp = Checkpoint::new(&p, Some(11));
        let back: Checkpoint = serde_json::from_str(&serde_json::to_string(&cp).unwrap()).unwrap();
        assert_eq!(back.params().unwrap(), p);
        assert_eq!(back.gates().unwrap().unwrap(), sample_gates(11, 4, 3, 2).unwrap());
        let mut bad = cp.clone();
        bad.z[0].pop();
        assert!(bad.params().is_err());
    }
}
