//! Deep stacks of convex layers.
//!
//! A hidden layer keeps the token axis: output token `t` is produced by its
//! own gated convex head with `d_out` outputs reading the whole `n x d_in`
//! input. The final layer is an ordinary convex model. Each layer is convex
//! in its own weights with the gates fixed, but the stack as a whole is not
//! jointly convex.

use std::time::Instant;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::convex::{self, gate_mask, sample_gates, ConvexParams, ConvexVariant, GateBank};
use crate::data::{Dataset, TokenMatrix};
use crate::error::{Error, Result};
use crate::losses::{self, LossKind};
use crate::nonconvex::{evaluate, AdamState, Optimizer};
use crate::rng;
use crate::trace::{MetricsRow, MetricsTrace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLayer {
    pub gates: GateBank,
    /// One gated head per output token, each with `d_out` outputs.
    pub heads: Vec<ConvexParams>,
}

impl TokenLayer {
    pub fn d_in(&self) -> usize {
        self.heads.first().map_or(0, |h| h.d)
    }

    pub fn d_out(&self) -> usize {
        self.heads.first().map_or(0, |h| h.c)
    }

    pub fn forward(&self, x: &TokenMatrix) -> Result<Array2<f64>> {
        let n = x.rows();
        if self.heads.len() != n {
            return Err(Error::shape(format!("layer has {} token heads for {n} tokens", self.heads.len())));
        }
        let mask = gate_mask(&self.gates, x)?;
        let mut out = Array2::zeros((n, self.d_out()));
        for (t, head) in self.heads.iter().enumerate() {
            if head.variant != ConvexVariant::Fcn || head.h != self.gates.len() {
                return Err(Error::shape(format!("token head {t} does not match the layer gates")));
            }
            let row = convex::convex_forward(head, x, Some(&mask))?;
            out.row_mut(t).assign(&ndarray::Array1::from(row));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexStack {
    pub hidden: Vec<TokenLayer>,
    pub output: ConvexParams,
    pub output_gates: Option<GateBank>,
}

impl ConvexStack {
    pub fn layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn num_parameters(&self) -> usize {
        self.hidden.iter().flat_map(|l| &l.heads).map(|h| h.num_parameters()).sum::<usize>()
            + self.output.num_parameters()
    }

    /// Sum of row norms over every convex head in the stack.
    pub fn penalty(&self) -> f64 {
        self.hidden.iter().flat_map(|l| &l.heads).map(convex::group_lasso_penalty).sum::<f64>()
            + convex::group_lasso_penalty(&self.output)
    }
}

/// Run every layer in turn; a stack without hidden layers is exactly the
/// output convex model.
pub fn stack_forward(stack: &ConvexStack, x: &TokenMatrix) -> Result<Vec<f64>> {
    let mut h = x.clone();
    for (i, layer) in stack.hidden.iter().enumerate() {
        if layer.d_in() != h.cols() {
            return Err(Error::shape(format!("layer {i} expects width {}, got {}", layer.d_in(), h.cols())));
        }
        h = TokenMatrix::from_array_unchecked(layer.forward(&h)?);
    }
    if stack.output.d != h.cols() {
        return Err(Error::shape(format!("output layer expects width {}, got {}", stack.output.d, h.cols())));
    }
    let mask = match &stack.output_gates {
        Some(g) => Some(gate_mask(g, &h)?),
        None => None,
    };
    convex::convex_forward(&stack.output, &h, mask.as_deref())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackConfig {
    /// Total layers including the output layer.
    pub layers: usize,
    /// Token width of the hidden layers; 0 keeps the input width.
    pub width: usize,
    /// Gates per layer.
    pub gates: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub eval_interval: usize,
    pub stop_at_test_acc: Option<f64>,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            layers: 2,
            width: 0,
            gates: 8,
            steps: 1000,
            lr: 1e-3,
            beta: 1e-4,
            loss: LossKind::CrossEntropy,
            seed: 0,
            eval_interval: 50,
            stop_at_test_acc: None,
        }
    }
}

/// Dense form of one layer used for batched training.
///
/// Column `(t * h + j) * d_out + l` of `w` is the flattened `Z` of token head
/// `t`, gate `j`, output `l` (the output layer has a single "token").
struct DenseLayer {
    n: usize,
    d_in: usize,
    d_out: usize,
    h: usize,
    tokens: usize,
    w: Array2<f64>,
    /// Column `j` is the flattened `u1_j u2_j^T`.
    gate_op: Array2<f64>,
}

impl DenseLayer {
    fn new(n: usize, d_in: usize, d_out: usize, tokens: usize, gates: &GateBank) -> Self {
        let h = gates.len();
        let mut gate_op = Array2::zeros((n * d_in, h));
        for j in 0..h {
            for k in 0..n {
                for m in 0..d_in {
                    gate_op[[k * d_in + m, j]] = gates.u1[j][k] * gates.u2[j][m];
                }
            }
        }
        DenseLayer { n, d_in, d_out, h, tokens, w: Array2::zeros((n * d_in, tokens * h * d_out)), gate_op }
    }

    fn col(&self, t: usize, j: usize, l: usize) -> usize {
        (t * self.h + j) * self.d_out + l
    }

    fn masks(&self, input: &Array2<f64>) -> Array2<f64> {
        input.dot(&self.gate_op).mapv(|v| if v >= 0.0 { 1.0 } else { 0.0 })
    }

    /// Returns the `N x (tokens * d_out)` output and the pre-mask products.
    fn forward(&self, input: &Array2<f64>, masks: &Array2<f64>) -> Array2<f64> {
        let pre = input.dot(&self.w);
        let rows = input.nrows();
        let mut out = Array2::zeros((rows, self.tokens * self.d_out));
        for i in 0..rows {
            for t in 0..self.tokens {
                for j in 0..self.h {
                    let m = masks[[i, j]];
                    if m == 0.0 {
                        continue;
                    }
                    let base = self.col(t, j, 0);
                    let src = pre.slice(s![i, base..base + self.d_out]);
                    let mut dst = out.slice_mut(s![i, t * self.d_out..(t + 1) * self.d_out]);
                    dst += &src;
                }
            }
        }
        out
    }

    /// Gradient with respect to the weights and to the input.
    fn backward(&self, input: &Array2<f64>, masks: &Array2<f64>, d_out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let rows = input.nrows();
        let mut d_pre = Array2::zeros((rows, self.w.ncols()));
        for i in 0..rows {
            for t in 0..self.tokens {
                let src = d_out.slice(s![i, t * self.d_out..(t + 1) * self.d_out]);
                for j in 0..self.h {
                    if masks[[i, j]] == 0.0 {
                        continue;
                    }
                    let base = self.col(t, j, 0);
                    d_pre.slice_mut(s![i, base..base + self.d_out]).assign(&src);
                }
            }
        }
        (input.t().dot(&d_pre), d_pre.dot(&self.w.t()))
    }

    /// Group-lasso penalty and its subgradient over token rows of every `Z`.
    fn penalty_grad(&self) -> (f64, Array2<f64>) {
        let mut g = Array2::zeros(self.w.raw_dim());
        let mut total = 0.0;
        for col in 0..self.w.ncols() {
            for k in 0..self.n {
                let block = self.w.slice(s![k * self.d_in..(k + 1) * self.d_in, col]);
                let norm = block.dot(&block).sqrt();
                total += norm;
                if norm > 0.0 {
                    g.slice_mut(s![k * self.d_in..(k + 1) * self.d_in, col]).assign(&(&block / norm));
                }
            }
        }
        (total, g)
    }

    fn params(&self, t: usize, c: usize) -> ConvexParams {
        let mut p = ConvexParams::zeros(ConvexVariant::Fcn, self.n, self.d_in, c, self.h).unwrap();
        for j in 0..self.h {
            for l in 0..c {
                let col = self.w.column(self.col(t, j, l));
                *p.z_mut(j, l) = col.to_owned().into_shape_with_order((self.n, self.d_in)).unwrap();
            }
        }
        p
    }
}

fn flatten(data: &Dataset) -> Array2<f64> {
    let (n, d) = (data.n(), data.d());
    let mut out = Array2::zeros((data.len(), n * d));
    for (i, s) in data.samples().iter().enumerate() {
        out.row_mut(i).assign(&ndarray::Array1::from_iter(s.x.as_array().iter().copied()));
    }
    out
}

struct DenseStack {
    layers: Vec<DenseLayer>,
    gates: Vec<GateBank>,
}

impl DenseStack {
    fn forward(&self, input: &Array2<f64>) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut acts = vec![input.clone()];
        let mut masks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = acts.last().unwrap();
            let m = layer.masks(a);
            let next = layer.forward(a, &m);
            masks.push(m);
            acts.push(next);
        }
        (acts, masks)
    }

    fn to_stack(&self) -> ConvexStack {
        let last = self.layers.len() - 1;
        let hidden = self.layers[..last]
            .iter()
            .zip(&self.gates)
            .map(|(l, g)| TokenLayer { gates: g.clone(), heads: (0..l.tokens).map(|t| l.params(t, l.d_out)).collect() })
            .collect();
        let out = &self.layers[last];
        ConvexStack { hidden, output: out.params(0, out.d_out), output_gates: Some(self.gates[last].clone()) }
    }
}

/// End-to-end Adam training of a convex stack with the group-lasso
/// subgradient. Gate masks are recomputed from the current activations and
/// treated as constants.
pub fn train_stack(train: &Dataset, test: Option<&Dataset>, config: &StackConfig) -> Result<(ConvexStack, MetricsTrace)> {
    if config.layers == 0 || config.gates == 0 {
        return Err(Error::domain("a stack needs at least one layer and one gate"));
    }
    if !(config.beta >= 0.0) {
        return Err(Error::domain("beta must be >= 0"));
    }
    losses::check_targets(train, config.loss)?;
    if let Some(t) = test {
        losses::check_targets(t, config.loss)?;
        if t.n() != train.n() || t.d() != train.d() || t.c() != train.c() {
            return Err(Error::shape("train and test sets differ in shape"));
        }
    }
    let (n, d, c) = (train.n(), train.d(), train.c());
    let width = if config.width == 0 { d } else { config.width };
    let mut init = rng::keyed(config.seed, rng::stream::INIT, 0);
    let mut layers = Vec::new();
    let mut gates = Vec::new();
    let mut d_in = d;
    for li in 0..config.layers {
        let is_out = li + 1 == config.layers;
        let (d_out, tokens) = if is_out { (c, 1) } else { (width, n) };
        let bank = sample_gates(config.seed.wrapping_add(li as u64), config.gates, n, d_in)?;
        let mut layer = DenseLayer::new(n, d_in, d_out, tokens, &bank);
        let scale = 1.0 / ((n * d_in) as f64 * (config.gates as f64 / 2.0).max(1.0)).sqrt();
        layer.w.iter_mut().for_each(|v| *v = scale * rng::normal(&mut init));
        layers.push(layer);
        gates.push(bank);
        d_in = d_out;
    }
    let mut dense = DenseStack { layers, gates };
    let x_train = flatten(train);
    let x_test = test.filter(|t| !t.is_empty()).map(flatten);
    let mut adam = AdamState::new(
        Optimizer::Adam,
        config.lr,
        &dense.layers.iter().map(|l| l.w.clone()).collect::<Vec<_>>(),
    );
    let mut trace = MetricsTrace::default();
    let start = Instant::now();
    let interval = config.eval_interval.max(1);
    let predict_rows = |dense: &DenseStack, x: &Array2<f64>| dense.forward(x).0.pop().unwrap();
    for step in 0..=config.steps {
        let (acts, masks) = dense.forward(&x_train);
        let logits = acts.last().unwrap();
        let mut loss = 0.0;
        let mut d_logits = Array2::zeros(logits.raw_dim());
        for (i, s) in train.samples().iter().enumerate() {
            let p = logits.row(i).to_vec();
            loss += losses::loss_value_unchecked(config.loss, &p, &s.target);
            let g = losses::loss_grad_unchecked(config.loss, &p, &s.target);
            d_logits.row_mut(i).assign(&ndarray::Array1::from(g));
        }
        let mut penalty = 0.0;
        let mut pen_grads = Vec::new();
        for layer in &dense.layers {
            let (p, g) = layer.penalty_grad();
            penalty += p;
            pen_grads.push(g);
        }
        let objective = loss + config.beta * penalty;
        if !objective.is_finite() {
            trace.truncated = true;
            break;
        }
        if step % interval == 0 || step == config.steps {
            let eval = |data: &Dataset, x: &Array2<f64>| {
                let out = predict_rows(&dense, x);
                evaluate(data, config.loss, |i, _| out.row(i).to_vec())
            };
            let (train_loss, train_acc) = {
                let mut l = 0.0;
                let mut correct = 0usize;
                for (i, s) in train.samples().iter().enumerate() {
                    let p = logits.row(i).to_vec();
                    l += losses::loss_value_unchecked(config.loss, &p, &s.target);
                    if let crate::data::Target::Class(y) = s.target {
                        correct += usize::from(losses::argmax(&p) == y);
                    }
                }
                let acc = train.is_classification().then(|| correct as f64 / train.len() as f64);
                (l / train.len() as f64, acc)
            };
            let (test_loss, test_acc) = match (test, &x_test) {
                (Some(t), Some(x)) => {
                    let (l, a) = eval(t, x);
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
        let mut grads = vec![Array2::zeros((0, 0)); dense.layers.len()];
        let mut upstream = d_logits;
        for li in (0..dense.layers.len()).rev() {
            let (gw, gin) = dense.layers[li].backward(&acts[li], &masks[li], &upstream);
            grads[li] = gw + &(&pen_grads[li] * config.beta);
            upstream = gin;
        }
        let mut ws: Vec<Array2<f64>> = dense.layers.iter_mut().map(|l| std::mem::take(&mut l.w)).collect();
        adam.step(&mut ws, &grads);
        for (l, w) in dense.layers.iter_mut().zip(ws) {
            l.w = w;
        }
    }
    Ok((dense.to_stack(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, Target};

    fn random_fcn(n: usize, d: usize, c: usize, h: usize, seed: u64) -> ConvexParams {
        let mut p = ConvexParams::zeros(ConvexVariant::Fcn, n, d, c, h).unwrap();
        let mut g = rng::keyed(seed, 77, 0);
        for z in &mut p.z {
            z.iter_mut().for_each(|v| *v = rng::normal(&mut g));
        }
        p
    }

    fn x(n: usize, d: usize, seed: u64) -> TokenMatrix {
        let mut g = rng::keyed(seed, 78, 0);
        TokenMatrix::new(Array2::from_shape_vec((n, d), rng::normal_vec(&mut g, n * d)).unwrap()).unwrap()
    }

    #[test]
    fn single_layer_is_convex_forward() {
        let out = random_fcn(3, 2, 2, 4, 1);
        let gates = sample_gates(9, 4, 3, 2).unwrap();
        let stack = ConvexStack { hidden: vec![], output: out.clone(), output_gates: Some(gates.clone()) };
        let xm = x(3, 2, 5);
        let mask = gate_mask(&gates, &xm).unwrap();
        assert_eq!(stack_forward(&stack, &xm).unwrap(), convex::convex_forward(&out, &xm, Some(&mask)).unwrap());
    }

    #[test]
    fn zero_last_layer_gives_zero() {
        let gates = sample_gates(1, 3, 3, 2).unwrap();
        let hidden = TokenLayer { gates, heads: (0..3).map(|t| random_fcn(3, 2, 4, 3, t)).collect() };
        let output = ConvexParams::zeros(ConvexVariant::Vector, 3, 4, 2, 1).unwrap();
        let stack = ConvexStack { hidden: vec![hidden], output, output_gates: None };
        assert_eq!(stack_forward(&stack, &x(3, 2, 1)).unwrap(), vec![0.0, 0.0]);
    }

    fn fill(a: &mut Array2<f64>, g: &mut rand_chacha::ChaCha8Rng) {
        a.iter_mut().for_each(|v| *v = rng::normal(g));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let (n, d, w, c, rows) = (3, 2, 2, 2, 4);
        let mut l1 = DenseLayer::new(n, d, w, n, &sample_gates(1, 2, n, d).unwrap());
        let mut l2 = DenseLayer::new(n, w, c, 1, &sample_gates(2, 2, n, w).unwrap());
        let mut g = rng::keyed(5, 79, 0);
        let mut input = Array2::zeros((rows, n * d));
        let mut r = Array2::zeros((rows, c));
        for a in [&mut l1.w, &mut l2.w, &mut input, &mut r] {
            fill(a, &mut g);
        }
        let m1 = l1.masks(&input);
        let hidden = l1.forward(&input, &m1);
        let m2 = l2.masks(&hidden);
        let f = |l1: &DenseLayer, l2: &DenseLayer, x: &Array2<f64>| (&l2.forward(&l1.forward(x, &m1), &m2) * &r).sum();
        let (gw2, gh) = l2.backward(&hidden, &m2, &r);
        let (gw1, gx) = l1.backward(&input, &m1, &gh);
        let eps = 1e-5;
        let close = |fd: f64, an: f64| (fd - an).abs() <= 1e-7 * (1.0 + an.abs());
        for idx in 0..l1.w.len() {
            let (i, j) = (idx / l1.w.ncols(), idx % l1.w.ncols());
            let mut p = DenseLayer { w: l1.w.clone(), gate_op: l1.gate_op.clone(), ..l1 };
            p.w[[i, j]] += eps;
            let up = f(&p, &l2, &input);
            p.w[[i, j]] -= 2.0 * eps;
            let down = f(&p, &l2, &input);
            assert!(close((up - down) / (2.0 * eps), gw1[[i, j]]), "w1[{i},{j}]");
        }
        for idx in 0..l2.w.len() {
            let (i, j) = (idx / l2.w.ncols(), idx % l2.w.ncols());
            let mut p = DenseLayer { w: l2.w.clone(), gate_op: l2.gate_op.clone(), ..l2 };
            p.w[[i, j]] += eps;
            let up = f(&l1, &p, &input);
            p.w[[i, j]] -= 2.0 * eps;
            let down = f(&l1, &p, &input);
            assert!(close((up - down) / (2.0 * eps), gw2[[i, j]]), "w2[{i},{j}]");
        }
        for idx in 0..input.len() {
            let (i, j) = (idx / input.ncols(), idx % input.ncols());
            let mut x = input.clone();
            x[[i, j]] += eps;
            let up = f(&l1, &l2, &x);
            x[[i, j]] -= 2.0 * eps;
            let down = f(&l1, &l2, &x);
            assert!(close((up - down) / (2.0 * eps), gx[[i, j]]), "x[{i},{j}]");
        }
    }

    #[test]
    fn dense_training_matches_structured_forward() {
        let samples: Vec<Sample> = (0..12).map(|i| Sample::new(x(3, 2, i), Target::Class((i % 3) as usize))).collect();
        let data = Dataset::from_samples(samples, Some(3)).unwrap();
        let cfg = StackConfig { layers: 3, width: 4, gates: 3, steps: 20, lr: 1e-2, ..StackConfig::default() };
        let (stack, trace) = train_stack(&data, None, &cfg).unwrap();
        assert_eq!(stack.layers(), 3);
        // the recorded train loss must agree with the structured forward pass
        let mut loss = 0.0;
        for s in data.samples() {
            loss += losses::loss_value(LossKind::CrossEntropy, &stack_forward(&stack, &s.x).unwrap(), &s.target).unwrap();
        }
        let last = trace.last().unwrap();
        assert_eq!(last.iter, 20);
        assert!((last.train_loss - loss / data.len() as f64).abs() < 1e-9);
    }
}
