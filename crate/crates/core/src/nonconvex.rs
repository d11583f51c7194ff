//! Nonconvex baselines: softmax attention blocks, the attention-only network
//! and the simplex-relaxed ("alternative") attention with projected training.

use std::time::Instant;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::convex::GateBank;
use crate::data::{Dataset, TokenMatrix};
use crate::error::{Error, Result};
use crate::losses::{self, LossKind};
use crate::rng;
use crate::trace::{MetricsRow, MetricsTrace};

/// Variance floor of the layer norm.
pub const LAYER_NORM_VAR_FLOOR: f64 = 1e-12;

/// Tolerance on simplex membership of `w1` heads.
pub const SIMPLEX_TOL: f64 = 1e-9;

pub(crate) fn softmax_rows_unchecked(u: &Array2<f64>) -> Array2<f64> {
    let mut out = u.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(u: &Array2<f64>) -> Result<Array2<f64>> {
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("softmax input has non-finite entries"));
    }
    Ok(softmax_rows_unchecked(u))
}

/// Row-wise layer normalisation with gain and bias.
pub fn layer_norm(x: &Array2<f64>, gain: &[f64], bias: &[f64]) -> Result<Array2<f64>> {
    if gain.len() != x.ncols() || bias.len() != x.ncols() {
        return Err(Error::shape("layer norm gain/bias length must equal the row width"));
    }
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let d = row.len() as f64;
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let s = 1.0 / var.max(LAYER_NORM_VAR_FLOOR).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * s * g + b;
        }
    }
    Ok(out)
}

/// One softmax transformer block: attention, output projection, layer norm
/// with skip connection, and a ReLU feed-forward layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardBlockParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

impl StandardBlockParams {
    pub fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        StandardBlockParams {
            wq: gaussian(d, d, rng),
            wk: gaussian(d, d, rng),
            wv: gaussian(d, d, rng),
            wo: gaussian(d, d, rng),
            w1: gaussian(d, hidden, rng),
            w2: gaussian(hidden, d, rng),
            ln_gain: vec![1.0; d],
            ln_bias: vec![0.0; d],
        }
    }

    fn check(&self, d: usize) -> Result<()> {
        let m = self.w1.ncols();
        let ok = [&self.wq, &self.wk, &self.wv, &self.wo].iter().all(|w| w.dim() == (d, d))
            && self.w1.nrows() == d
            && self.w2.dim() == (m, d)
            && self.ln_gain.len() == d
            && self.ln_bias.len() == d;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!("block parameters do not match embedding dimension {d}")))
        }
    }
}

/// Gaussian matrix with standard deviation `1/sqrt(rows)`.
pub(crate) fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let s = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_vec((rows, cols), rng::normal_vec(rng, rows * cols)).unwrap() * s
}

pub fn standard_block_forward(x: &TokenMatrix, p: &StandardBlockParams) -> Result<Array2<f64>> {
    p.check(x.cols())?;
    let x = x.as_array();
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let attn = softmax_rows(&q.dot(&k.t()))?.dot(&v);
    let a_o = attn.dot(&p.wo);
    let x_a = layer_norm(&a_o, &p.ln_gain, &p.ln_bias)? + x;
    Ok(x_a.dot(&p.w1).mapv(|v| v.max(0.0)).dot(&p.w2))
}

/// `softmax(X Wq Wk^T X^T) X Wv Wo`, an `n x c` output.
pub fn attention_only_forward(
    x: &TokenMatrix,
    wq: &Array2<f64>,
    wk: &Array2<f64>,
    wv: &Array2<f64>,
    wo: &Array2<f64>,
) -> Result<Array2<f64>> {
    let d = x.cols();
    if wq.nrows() != d || wk.nrows() != d || wv.nrows() != d || wq.ncols() != wk.ncols() || wo.nrows() != wv.ncols() {
        return Err(Error::shape("attention weights do not chain with the token matrix"));
    }
    let x = x.as_array();
    let scores = x.dot(wq).dot(&wk.t()).dot(&x.t());
    Ok(softmax_rows(&scores)?.dot(x).dot(wv).dot(wo))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltVariant {
    /// Scalar output, weight decay on `(w2, w3)`.
    Scalar,
    /// Vector output, `l1^2` penalty on `w3`.
    Vector,
    /// Vector output through a gated ReLU.
    Fcn,
}

/// One simplex-relaxed attention head: `w1` in the unit simplex over tokens,
/// `w2` over embedding coordinates and `w3` over outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltHead {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltAttnParams {
    pub variant: AltVariant,
    /// Output arity; 1 for the scalar variant.
    pub c: usize,
    pub heads: Vec<AltHead>,
}

impl AltAttnParams {
    pub fn init(variant: AltVariant, h: usize, n: usize, d: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        let heads = (0..h)
            .map(|_| AltHead {
                w1: vec![1.0 / n as f64; n],
                w2: rng::normal_vec(rng, d).into_iter().map(|v| v * s).collect(),
                w3: rng::normal_vec(rng, c).into_iter().map(|v| v * s).collect(),
            })
            .collect();
        AltAttnParams { variant, c, heads }
    }

    /// Output arity.
    pub fn outputs(&self) -> usize {
        self.c
    }

    fn check(&self, n: usize, d: usize) -> Result<()> {
        let c = self.outputs();
        for (j, h) in self.heads.iter().enumerate() {
            if h.w1.len() != n || h.w2.len() != d || h.w3.len() != c {
                return Err(Error::shape(format!("head {j} does not match n={n}, d={d}, c={c}")));
            }
            if self.variant == AltVariant::Scalar && c != 1 {
                return Err(Error::shape("scalar variant needs a scalar w3"));
            }
            let sum: f64 = h.w1.iter().sum();
            if h.w1.iter().any(|v| *v < -SIMPLEX_TOL || !v.is_finite()) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::domain(format!("head {j}: w1 is not in the unit simplex")));
            }
        }
        Ok(())
    }

    /// `(beta/2) sum_j (||w2j||^2 + r(w3j))` with `r = |.|^2` for scalar heads
    /// and `||.||_1^2` otherwise.
    pub fn regularizer(&self, beta: f64) -> f64 {
        0.5 * beta
            * self
                .heads
                .iter()
                .map(|h| {
                    let w2 = h.w2.iter().map(|v| v * v).sum::<f64>();
                    let w3 = match self.variant {
                        AltVariant::Scalar => h.w3[0] * h.w3[0],
                        _ => h.w3.iter().map(|v| v.abs()).sum::<f64>().powi(2),
                    };
                    w2 + w3
                })
                .sum::<f64>()
    }
}

/// Bilinear read-out `w1^T X w2` of one head.
pub(crate) fn head_score(x: &Array2<f64>, w1: &[f64], w2: &[f64]) -> f64 {
    let mut s = 0.0;
    for (k, a) in w1.iter().enumerate() {
        if *a == 0.0 {
            continue;
        }
        s += a * x.row(k).iter().zip(w2).map(|(u, v)| u * v).sum::<f64>();
    }
    s
}

/// Prediction of the simplex-relaxed attention model.
pub fn alt_forward(x: &TokenMatrix, p: &AltAttnParams, gates: Option<&GateBank>) -> Result<Vec<f64>> {
    p.check(x.rows(), x.cols())?;
    let mask = match (p.variant, gates) {
        (AltVariant::Fcn, Some(bank)) => {
            if bank.len() < p.heads.len() {
                return Err(Error::shape(format!("{} heads but only {} gates", p.heads.len(), bank.len())));
            }
            Some(crate::convex::gate_mask(bank, x)?)
        }
        (AltVariant::Fcn, None) => return Err(Error::domain("FCN variant needs a gate bank")),
        _ => None,
    };
    let mut out = vec![0.0; p.outputs()];
    for (j, h) in p.heads.iter().enumerate() {
        if mask.as_ref().is_some_and(|m| !m[j]) {
            continue;
        }
        let s = head_score(x.as_array(), &h.w1, &h.w2);
        for (o, w) in out.iter_mut().zip(&h.w3) {
            *o += s * w;
        }
    }
    Ok(out)
}

/// Euclidean projection onto `{w >= 0, sum w = 1}` by the sort-based method.
pub fn project_to_simplex(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::domain("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("non-finite input to simplex projection"));
    }
    let mut sorted = v.to_vec();
    // stable sort keeps ties in index order
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    Ok(v.iter().map(|x| (x - theta).max(0.0)).collect())
}

/// Softmax single-head attention-only network with a last-token read-out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionOnlyParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

/// A stack of standard blocks followed by a linear read-out of the last token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub blocks: Vec<StandardBlockParams>,
    pub readout: Array2<f64>,
}

impl TransformerParams {
    pub fn init(layers: usize, d: usize, hidden: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        TransformerParams {
            blocks: (0..layers).map(|_| StandardBlockParams::init(d, hidden, rng)).collect(),
            readout: gaussian(d, c, rng),
        }
    }

    pub fn forward(&self, x: &TokenMatrix) -> Result<Vec<f64>> {
        if self.readout.nrows() != x.cols() {
            return Err(Error::shape("read-out does not match embedding dimension"));
        }
        let mut h = x.clone();
        for b in &self.blocks {
            h = TokenMatrix::from_array_unchecked(standard_block_forward(&h, b)?);
        }
        let last = h.as_array().row(h.rows() - 1).to_owned();
        Ok(last.dot(&self.readout).to_vec())
    }
}

/// Training problem selector for the nonconvex models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// Softmax attention-only network with weight decay on all four matrices.
    AttentionOnly,
    /// Scalar-output simplex attention with weight decay.
    AltScalar,
    /// Vector-output simplex attention with an `l1^2` penalty on `w3`.
    AltVector,
    /// Gated-ReLU vector-output simplex attention.
    AltFcn,
    /// `L` stacked standard blocks with a last-token read-out.
    StandardBlocks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NonconvexParams {
    AttentionOnly(AttentionOnlyParams),
    Alt(AltAttnParams),
    Transformer(TransformerParams),
}

impl NonconvexParams {
    pub fn predict(&self, x: &TokenMatrix, gates: Option<&GateBank>) -> Result<Vec<f64>> {
        match self {
            NonconvexParams::AttentionOnly(p) => {
                let out = attention_only_forward(x, &p.wq, &p.wk, &p.wv, &p.wo)?;
                Ok(out.row(out.nrows() - 1).to_vec())
            }
            NonconvexParams::Alt(p) => alt_forward(x, p, gates),
            NonconvexParams::Transformer(p) => p.forward(x),
        }
    }

    pub fn num_parameters(&self) -> usize {
        to_tensors(self).iter().map(|t| t.len()).sum()
    }

    fn matches(&self, f: Formulation) -> bool {
        matches!(
            (self, f),
            (NonconvexParams::AttentionOnly(_), Formulation::AttentionOnly)
                | (NonconvexParams::Transformer(_), Formulation::StandardBlocks)
                | (NonconvexParams::Alt(AltAttnParams { variant: AltVariant::Scalar, .. }), Formulation::AltScalar)
                | (NonconvexParams::Alt(AltAttnParams { variant: AltVariant::Vector, .. }), Formulation::AltVector)
                | (NonconvexParams::Alt(AltAttnParams { variant: AltVariant::Fcn, .. }), Formulation::AltFcn)
        )
    }

    /// Regularizer of the formulation these parameters belong to.
    pub fn regularizer(&self, beta: f64) -> f64 {
        let sq = |w: &Array2<f64>| w.iter().map(|v| v * v).sum::<f64>();
        match self {
            NonconvexParams::AttentionOnly(p) => 0.5 * beta * (sq(&p.wq) + sq(&p.wk) + sq(&p.wv) + sq(&p.wo)),
            NonconvexParams::Transformer(p) => {
                0.5 * beta
                    * (p.blocks
                        .iter()
                        .map(|b| sq(&b.wq) + sq(&b.wk) + sq(&b.wv) + sq(&b.wo) + sq(&b.w1) + sq(&b.w2))
                        .sum::<f64>()
                        + sq(&p.readout))
            }
            NonconvexParams::Alt(p) => p.regularizer(beta),
        }
    }
}

/// Training loss plus the formulation's regularizer.
pub fn nonconvex_objective(
    params: &NonconvexParams,
    data: &Dataset,
    beta: f64,
    kind: LossKind,
    formulation: Formulation,
    gates: Option<&GateBank>,
) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::domain(format!("beta must be >= 0, got {beta}")));
    }
    if !params.matches(formulation) {
        return Err(Error::domain(format!("parameters do not belong to formulation {formulation:?}")));
    }
    let mut loss = 0.0;
    for s in data.samples() {
        loss += losses::loss_value(kind, &params.predict(&s.x, gates)?, &s.target)?;
    }
    Ok(loss + params.regularizer(beta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub eval_interval: usize,
    pub beta: f64,
    pub loss: LossKind,
    /// Heads of the simplex models.
    pub heads: usize,
    /// Blocks of the standard transformer.
    pub layers: usize,
    /// Hidden width of the block feed-forward layer; 0 means `d`.
    pub hidden: usize,
    /// Stop once test and train accuracy reach this value.
    pub stop_at_test_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            lr: 1e-2,
            seed: 0,
            optimizer: Optimizer::Adam,
            eval_interval: 50,
            beta: 1e-3,
            loss: LossKind::Squared,
            heads: 1,
            layers: 1,
            hidden: 0,
            stop_at_test_acc: None,
        }
    }
}

/// Adam with bias correction, or plain gradient descent.
pub(crate) struct AdamState {
    optimizer: Optimizer,
    lr: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl AdamState {
    pub(crate) fn new(optimizer: Optimizer, lr: f64, shapes: &[Array2<f64>]) -> Self {
        let zeros = || shapes.iter().map(|a| Array2::zeros(a.raw_dim())).collect();
        AdamState { optimizer, lr, m: zeros(), v: zeros(), t: 0 }
    }

    pub(crate) fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        match self.optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.scaled_add(-self.lr, g);
                }
            }
            Optimizer::Adam => {
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    m.zip_mut_with(g, |m, g| *m = B1 * *m + (1.0 - B1) * g);
                    v.zip_mut_with(g, |v, g| *v = B2 * *v + (1.0 - B2) * g * g);
                    let lr = self.lr;
                    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, m, v| {
                        *p -= lr * (m / c1) / ((v / c2).sqrt() + EPS);
                    });
                }
            }
        }
    }
}

/// Flat tensor view of a parameter set for the generic training loop.
fn to_tensors(p: &NonconvexParams) -> Vec<Array2<f64>> {
    let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
    let col = |v: &[f64]| Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap();
    match p {
        NonconvexParams::AttentionOnly(a) => vec![a.wq.clone(), a.wk.clone(), a.wv.clone(), a.wo.clone()],
        NonconvexParams::Alt(a) => a.heads.iter().flat_map(|h| [row(&h.w1), col(&h.w2), row(&h.w3)]).collect(),
        NonconvexParams::Transformer(t) => {
            let mut out = Vec::new();
            for b in &t.blocks {
                out.extend([
                    b.wq.clone(),
                    b.wk.clone(),
                    b.wv.clone(),
                    b.wo.clone(),
                    b.w1.clone(),
                    b.w2.clone(),
                    row(&b.ln_gain),
                    row(&b.ln_bias),
                ]);
            }
            out.push(t.readout.clone());
            out
        }
    }
}

fn from_tensors(template: &NonconvexParams, t: &[Array2<f64>]) -> NonconvexParams {
    let flat = |a: &Array2<f64>| a.iter().copied().collect::<Vec<f64>>();
    match template {
        NonconvexParams::AttentionOnly(_) => NonconvexParams::AttentionOnly(AttentionOnlyParams {
            wq: t[0].clone(),
            wk: t[1].clone(),
            wv: t[2].clone(),
            wo: t[3].clone(),
        }),
        NonconvexParams::Alt(a) => NonconvexParams::Alt(AltAttnParams {
            variant: a.variant,
            c: a.c,
            heads: t
                .chunks(3)
                .map(|c| AltHead { w1: flat(&c[0]), w2: flat(&c[1]), w3: flat(&c[2]) })
                .collect(),
        }),
        NonconvexParams::Transformer(tp) => {
            let blocks = t[..t.len() - 1]
                .chunks(8)
                .map(|c| StandardBlockParams {
                    wq: c[0].clone(),
                    wk: c[1].clone(),
                    wv: c[2].clone(),
                    wo: c[3].clone(),
                    w1: c[4].clone(),
                    w2: c[5].clone(),
                    ln_gain: flat(&c[6]),
                    ln_bias: flat(&c[7]),
                })
                .collect::<Vec<_>>();
            debug_assert_eq!(blocks.len(), tp.blocks.len());
            NonconvexParams::Transformer(TransformerParams { blocks, readout: t[t.len() - 1].clone() })
        }
    }
}

/// Record the prediction of one sample on a tape; returns the `1 x c` output.
fn record(tape: &mut Tape, p: &NonconvexParams, vars: &[Var], x: &TokenMatrix, mask: Option<&[bool]>) -> Var {
    let xv = tape.leaf(x.as_array().clone());
    match p {
        NonconvexParams::AttentionOnly(_) => {
            let (wq, wk, wv, wo) = (vars[0], vars[1], vars[2], vars[3]);
            let q = tape.matmul(xv, wq);
            let k = tape.matmul(xv, wk);
            let s = tape.matmul_t(q, k);
            let a = tape.softmax_rows(s);
            let xv_ = tape.matmul(xv, wv);
            let o = tape.matmul(a, xv_);
            let o = tape.matmul(o, wo);
            tape.row(o, x.rows() - 1)
        }
        NonconvexParams::Alt(a) => {
            let mut acc: Option<Var> = None;
            for (j, c) in vars.chunks(3).enumerate() {
                if mask.is_some_and(|m| !m[j]) {
                    continue;
                }
                let s = tape.matmul(c[0], xv);
                let s = tape.matmul(s, c[1]);
                let o = tape.matmul(s, c[2]);
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, o),
                    None => o,
                });
            }
            acc.unwrap_or_else(|| tape.leaf(Array2::zeros((1, a.outputs()))))
        }
        NonconvexParams::Transformer(tp) => {
            let mut h = xv;
            for c in vars[..vars.len() - 1].chunks(8) {
                let q = tape.matmul(h, c[0]);
                let k = tape.matmul(h, c[1]);
                let v = tape.matmul(h, c[2]);
                let s = tape.matmul_t(q, k);
                let a = tape.softmax_rows(s);
                let a = tape.matmul(a, v);
                let a = tape.matmul(a, c[3]);
                let a = tape.standardize_rows(a, LAYER_NORM_VAR_FLOOR);
                let a = tape.mul_row(a, c[6]);
                let a = tape.add_row(a, c[7]);
                let xa = tape.add(a, h);
                let f = tape.matmul(xa, c[4]);
                let f = tape.relu(f);
                h = tape.matmul(f, c[5]);
            }
            debug_assert_eq!(tp.blocks.len() * 8 + 1, vars.len());
            let last = tape.row(h, x.rows() - 1);
            tape.matmul(last, vars[vars.len() - 1])
        }
    }
}

/// Loss and parameter gradients of the data-fit term over a dataset.
fn loss_and_grad(
    p: &NonconvexParams,
    tensors: &[Array2<f64>],
    data: &Dataset,
    kind: LossKind,
    masks: Option<&[Vec<bool>]>,
) -> (f64, Vec<Array2<f64>>) {
    let mut total = 0.0;
    let mut grads: Vec<Array2<f64>> = tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
    if let NonconvexParams::Alt(_) = p {
        return alt_loss_and_grad(tensors, grads, data, kind, masks);
    }
    for (i, s) in data.samples().iter().enumerate() {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = record(&mut tape, p, &vars, &s.x, masks.map(|m| m[i].as_slice()));
        let pred = tape.value(out).row(0).to_vec();
        if pred.iter().any(|v| !v.is_finite()) {
            return (f64::NAN, grads);
        }
        total += losses::loss_value_unchecked(kind, &pred, &s.target);
        let g = losses::loss_grad_unchecked(kind, &pred, &s.target);
        let seed = Array2::from_shape_vec((1, g.len()), g).unwrap();
        let mut adj = tape.backward(out, seed);
        for (acc, v) in grads.iter_mut().zip(&vars) {
            *acc += &tape.grad_of(&mut adj, *v);
        }
    }
    (total, grads)
}

/// Closed-form gradients of the simplex-attention data fit.
fn alt_loss_and_grad(
    tensors: &[Array2<f64>],
    mut grads: Vec<Array2<f64>>,
    data: &Dataset,
    kind: LossKind,
    masks: Option<&[Vec<bool>]>,
) -> (f64, Vec<Array2<f64>>) {
    let heads = tensors.len() / 3;
    let c = tensors.get(2).map_or(0, |t| t.len());
    let mut total = 0.0;
    let mut scores = vec![0.0; heads];
    for (i, s) in data.samples().iter().enumerate() {
        let x = s.x.as_array();
        let mut pred = vec![0.0; c];
        for j in 0..heads {
            if masks.is_some_and(|m| !m[i][j]) {
                scores[j] = 0.0;
                continue;
            }
            let w1 = tensors[3 * j].row(0);
            let xw2 = x.dot(&tensors[3 * j + 1].column(0));
            scores[j] = w1.dot(&xw2);
            for (o, w) in pred.iter_mut().zip(tensors[3 * j + 2].iter()) {
                *o += scores[j] * w;
            }
        }
        if pred.iter().any(|v| !v.is_finite()) {
            return (f64::NAN, grads);
        }
        total += losses::loss_value_unchecked(kind, &pred, &s.target);
        let g = losses::loss_grad_unchecked(kind, &pred, &s.target);
        for j in 0..heads {
            if masks.is_some_and(|m| !m[i][j]) {
                continue;
            }
            let ds: f64 = tensors[3 * j + 2].iter().zip(&g).map(|(w, g)| w * g).sum();
            for (dw3, gl) in grads[3 * j + 2].iter_mut().zip(&g) {
                *dw3 += scores[j] * gl;
            }
            if ds == 0.0 {
                continue;
            }
            let xw2 = x.dot(&tensors[3 * j + 1].column(0));
            let xtw1 = x.t().dot(&tensors[3 * j].row(0));
            grads[3 * j].row_mut(0).scaled_add(ds, &xw2);
            grads[3 * j + 1].column_mut(0).scaled_add(ds, &xtw1);
        }
    }
    (total, grads)
}

/// Add the (sub)gradient of the formulation's regularizer.
fn add_regularizer_grad(p: &NonconvexParams, tensors: &[Array2<f64>], grads: &mut [Array2<f64>], beta: f64) {
    match p {
        NonconvexParams::AttentionOnly(_) => {
            for (g, t) in grads.iter_mut().zip(tensors) {
                g.scaled_add(beta, t);
            }
        }
        NonconvexParams::Transformer(_) => {
            for (i, (g, t)) in grads.iter_mut().zip(tensors).enumerate() {
                let is_ln = i < tensors.len() - 1 && matches!(i % 8, 6 | 7);
                if !is_ln {
                    g.scaled_add(beta, t);
                }
            }
        }
        NonconvexParams::Alt(a) => {
            for (j, chunk) in tensors.chunks(3).enumerate() {
                grads[3 * j + 1].scaled_add(beta, &chunk[1]);
                match a.variant {
                    AltVariant::Scalar => grads[3 * j + 2].scaled_add(beta, &chunk[2]),
                    _ => {
                        let l1: f64 = chunk[2].iter().map(|v| v.abs()).sum();
                        let sign = chunk[2].mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                        grads[3 * j + 2].scaled_add(beta * l1, &sign);
                    }
                }
            }
        }
    }
}

fn project_heads(p: &NonconvexParams, tensors: &mut [Array2<f64>]) {
    if let NonconvexParams::Alt(_) = p {
        for chunk in tensors.chunks_mut(3) {
            let w1: Vec<f64> = chunk[0].iter().copied().collect();
            if let Ok(proj) = project_to_simplex(&w1) {
                chunk[0].iter_mut().zip(proj).for_each(|(d, v)| *d = v);
            }
        }
    }
}

/// Mean loss and accuracy (classification only) of a model on a dataset.
pub(crate) fn evaluate(
    data: &Dataset,
    kind: LossKind,
    mut predict: impl FnMut(usize, &TokenMatrix) -> Vec<f64>,
) -> (f64, Option<f64>) {
    if data.is_empty() {
        return (f64::NAN, None);
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (i, s) in data.samples().iter().enumerate() {
        let p = predict(i, &s.x);
        loss += losses::loss_value_unchecked(kind, &p, &s.target);
        if let crate::data::Target::Class(label) = s.target {
            if losses::argmax(&p) == label {
                correct += 1;
            }
        }
    }
    let acc = data.is_classification().then(|| correct as f64 / data.len() as f64);
    (loss / data.len() as f64, acc)
}

pub fn init_params(formulation: Formulation, data: &Dataset, config: &TrainConfig) -> NonconvexParams {
    let (n, d, c) = (data.n(), data.d(), data.c());
    let mut g = rng::keyed(config.seed, rng::stream::INIT, 0);
    match formulation {
        Formulation::AttentionOnly => NonconvexParams::AttentionOnly(AttentionOnlyParams {
            wq: gaussian(d, d, &mut g),
            wk: gaussian(d, d, &mut g),
            wv: gaussian(d, d, &mut g),
            wo: gaussian(d, c, &mut g),
        }),
        Formulation::StandardBlocks => {
            let hidden = if config.hidden == 0 { d } else { config.hidden };
            NonconvexParams::Transformer(TransformerParams::init(config.layers.max(1), d, hidden, c, &mut g))
        }
        Formulation::AltScalar => NonconvexParams::Alt(AltAttnParams::init(AltVariant::Scalar, config.heads, n, d, 1, &mut g)),
        Formulation::AltVector => NonconvexParams::Alt(AltAttnParams::init(AltVariant::Vector, config.heads, n, d, c, &mut g)),
        Formulation::AltFcn => NonconvexParams::Alt(AltAttnParams::init(AltVariant::Fcn, config.heads, n, d, c, &mut g)),
    }
}

/// Projected first-order training of a nonconvex formulation.
///
/// `gates` is required for the gated-ReLU formulation. Divergence stops the run
/// and sets [`MetricsTrace::truncated`].
pub fn train_nonconvex(
    train: &Dataset,
    test: Option<&Dataset>,
    formulation: Formulation,
    config: &TrainConfig,
    gates: Option<&GateBank>,
) -> Result<(NonconvexParams, MetricsTrace)> {
    let init = init_params(formulation, train, config);
    train_from(init, train, test, formulation, config, gates)
}

pub fn train_from(
    init: NonconvexParams,
    train: &Dataset,
    test: Option<&Dataset>,
    formulation: Formulation,
    config: &TrainConfig,
    gates: Option<&GateBank>,
) -> Result<(NonconvexParams, MetricsTrace)> {
    if !(config.beta >= 0.0) {
        return Err(Error::domain("beta must be >= 0"));
    }
    if !init.matches(formulation) {
        return Err(Error::domain("initial parameters do not match the formulation"));
    }
    if formulation == Formulation::AltFcn && gates.is_none() {
        return Err(Error::domain("gated formulation needs a gate bank"));
    }
    losses::check_targets(train, config.loss)?;
    if let Some(t) = test {
        losses::check_targets(t, config.loss)?;
    }
    let masks = match gates {
        Some(bank) if formulation == Formulation::AltFcn => Some(
            train
                .samples()
                .iter()
                .map(|s| crate::convex::gate_mask(bank, &s.x))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    let start = Instant::now();
    let mut tensors = to_tensors(&init);
    let mut rule = AdamState::new(config.optimizer, config.lr, &tensors);
    let mut trace = MetricsTrace::default();
    let interval = config.eval_interval.max(1);
    let mut params = init.clone();
    for step in 0..=config.steps {
        let (loss, mut grads) = loss_and_grad(&init, &tensors, train, config.loss, masks.as_deref());
        params = from_tensors(&init, &tensors);
        let objective = loss + params.regularizer(config.beta);
        if !objective.is_finite() {
            trace.truncated = true;
            break;
        }
        if step % interval == 0 || step == config.steps {
            let (train_loss, train_acc) =
                evaluate(train, config.loss, |_, x| params.predict(x, gates).unwrap_or_default());
            let (test_loss, test_acc) = match test {
                Some(t) if !t.is_empty() => {
                    let (l, a) = evaluate(t, config.loss, |_, x| params.predict(x, gates).unwrap_or_default());
                    (Some(l), a)
                }
                _ => (None, None),
            };
            trace.rows.push(MetricsRow {
                iter: step,
                train_loss,
                train_acc,
                test_loss,
                test_acc,
                objective,
                kkt_residual: None,
                seconds: start.elapsed().as_secs_f64(),
            });
            if let (Some(stop), Some(acc)) = (config.stop_at_test_acc, test_acc) {
                if acc >= stop && train_acc.is_none_or(|a| a >= stop) {
                    break;
                }
            }
        }
        if step == config.steps {
            break;
        }
        add_regularizer_grad(&init, &tensors, &mut grads, config.beta);
        rule.step(&mut tensors, &grads);
        project_heads(&init, &mut tensors);
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};

    fn tm(rows: &[Vec<f64>]) -> TokenMatrix {
        TokenMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&array![[0.0, 0.0], [1.0, 2.0]]).unwrap();
        assert_eq!(s.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((s[[1, 0]] - 0.2689414213699951).abs() < 1e-12);
        assert!((s[[1, 1]] - 0.7310585786300049).abs() < 1e-12);
        let shifted = softmax_rows(&array![[101.0, 102.0]]).unwrap();
        assert!((shifted[[0, 0]] - s[[1, 0]]).abs() < 1e-15);
        assert!(softmax_rows(&array![[f64::INFINITY, 0.0]]).is_err());
    }

    #[test]
    fn block_with_zero_output_weights_is_zero() {
        let mut g = rng::keyed(1, 0, 0);
        let mut p = StandardBlockParams::init(3, 4, &mut g);
        p.wo.fill(0.0);
        p.w2.fill(0.0);
        let x = tm(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        assert!(standard_block_forward(&x, &p).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_constant_row() {
        let out = layer_norm(&array![[3.0, 3.0, 3.0]], &[1.0; 3], &[0.0; 3]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_only_special_cases() {
        let mut g = rng::keyed(2, 0, 0);
        let x = tm(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 0.5]]);
        let wq = gaussian(2, 2, &mut g);
        let wk = gaussian(2, 2, &mut g);
        let wo = gaussian(2, 1, &mut g);
        let zero = Array2::zeros((2, 2));
        let out = attention_only_forward(&x, &wq, &wk, &zero, &wo).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        // zero query/key gives uniform attention
        let wv = gaussian(2, 2, &mut g);
        let out = attention_only_forward(&x, &zero, &zero, &wv, &wo).unwrap();
        let mean = x.as_array().mean_axis(Axis(0)).unwrap();
        let expect = mean.dot(&wv).dot(&wo);
        for r in out.rows() {
            assert!((r[0] - expect[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn alt_forward_reads_one_entry() {
        let mut x = Array2::zeros((2, 2));
        x[[0, 0]] = 5.0;
        x[[1, 1]] = 7.0;
        let p = AltAttnParams {
            variant: AltVariant::Scalar,
            c: 1,
            heads: vec![AltHead { w1: vec![1.0, 0.0], w2: vec![1.0, 0.0], w3: vec![1.0] }],
        };
        assert_eq!(alt_forward(&TokenMatrix::new(x.clone()).unwrap(), &p, None).unwrap(), vec![5.0]);
        let mut zero = p.clone();
        zero.heads[0].w3 = vec![0.0];
        assert_eq!(alt_forward(&TokenMatrix::new(x).unwrap(), &zero, None).unwrap(), vec![0.0]);
    }

    #[test]
    fn alt_forward_rejects_off_simplex() {
        let p = AltAttnParams {
            variant: AltVariant::Scalar,
            c: 1,
            heads: vec![AltHead { w1: vec![0.7, 0.7], w2: vec![1.0], w3: vec![1.0] }],
        };
        assert!(alt_forward(&tm(&[vec![1.0], vec![2.0]]), &p, None).is_err());
    }

    #[test]
    fn simplex_projection_examples() {
        assert_eq!(project_to_simplex(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        let p = project_to_simplex(&[0.5, 0.5, 1.0]).unwrap();
        for (a, b) in p.iter().zip([1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(project_to_simplex(&[-1.0, -1.0]).unwrap(), vec![0.5, 0.5]);
        assert!(project_to_simplex(&[f64::NAN]).is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let samples = (0..4)
            .map(|i| {
                crate::data::Sample::new(
                    tm(&[vec![i as f64, 1.0], vec![0.5, -(i as f64)]]),
                    crate::data::Target::Scalar(i as f64),
                )
            })
            .collect();
        let ds = Dataset::from_samples(samples, None).unwrap();
        let cfg = TrainConfig { steps: 0, heads: 2, ..TrainConfig::default() };
        let (p, trace) = train_nonconvex(&ds, None, Formulation::AltScalar, &cfg, None).unwrap();
        assert_eq!(p, init_params(Formulation::AltScalar, &ds, &cfg));
        assert_eq!(trace.rows.len(), 1);
    }

    #[test]
    fn objective_rejects_negative_beta() {
        let ds = Dataset::from_samples(
            vec![crate::data::Sample::new(tm(&[vec![1.0]]), crate::data::Target::Scalar(1.0))],
            None,
        )
        .unwrap();
        let p = NonconvexParams::Alt(AltAttnParams {
            variant: AltVariant::Scalar,
            c: 1,
            heads: vec![AltHead { w1: vec![1.0], w2: vec![0.0], w3: vec![0.0] }],
        });
        assert!(nonconvex_objective(&p, &ds, -1.0, LossKind::Squared, Formulation::AltScalar, None).is_err());
        let v = nonconvex_objective(&p, &ds, 0.0, LossKind::Squared, Formulation::AltScalar, None).unwrap();
        assert_eq!(v, 0.5);
        assert!(nonconvex_objective(&p, &ds, 0.0, LossKind::Squared, Formulation::AttentionOnly, None).is_err());
    }
}
