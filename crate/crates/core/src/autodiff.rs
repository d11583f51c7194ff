//! A small reverse-mode tape over dense matrices.
//!
//! Only the operations the baselines and the deep convex stack need are
//! provided. Values are stored per node; `backward` returns the adjoint of
//! every node.

use ndarray::{Array2, Axis};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Elementwise product with a constant.
    MulConst(Var, Array2<f64>),
    /// Multiply every row by a `1 x d` vector.
    MulRow(Var, Var),
    /// Add a `1 x d` vector to every row.
    AddRow(Var, Var),
    SoftmaxRows(Var),
    /// Row-wise standardisation (no affine part); stores `1/std` per row.
    StandardizeRows(Var, Vec<f64>),
    Relu(Var),
    /// Select one row, giving a `1 x d` matrix.
    Row(Var, usize),
    /// Reinterpret the row-major data with a new shape.
    Reshape(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = crate::nonconvex::softmax_rows_unchecked(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// `(x - mean) / sqrt(max(var, floor))` per row.
    pub fn standardize_rows(&mut self, a: Var, var_floor: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let d = row.len() as f64;
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let s = 1.0 / var.max(var_floor).sqrt();
            row.mapv_inplace(|v| (v - mean) * s);
            inv.push(s);
        }
        self.push(out, Op::StandardizeRows(a, inv))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn row(&mut self, a: Var, k: usize) -> Var {
        let v = self.value(a).row(k).insert_axis(Axis(0)).to_owned();
        self.push(v, Op::Row(a, k))
    }

    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let src = self.value(a);
        let data: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec(shape, data).expect("reshape keeps the element count");
        self.push(v, Op::Reshape(a))
    }

    /// Adjoints of all nodes given the adjoint of `out`.
    pub fn backward(&self, out: Var, seed: Array2<f64>) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // interior adjoints are consumed here; only leaves keep theirs
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &g * c),
                Op::MulRow(a, row) => {
                    let grow = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, &g * self.value(*row));
                    accumulate(&mut grads, *row, grow);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut ga = Array2::zeros(s.raw_dim());
                    for ((srow, grow), mut out) in s.rows().into_iter().zip(g.rows()).zip(ga.rows_mut()) {
                        let dot: f64 = srow.iter().zip(grow.iter()).map(|(x, y)| x * y).sum();
                        for ((o, sv), gv) in out.iter_mut().zip(srow.iter()).zip(grow.iter()) {
                            *o = sv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::StandardizeRows(a, inv) => {
                    // y = (x - mean) * s with s = 1/sqrt(var); when the variance
                    // floor is active s is constant and only the centring remains.
                    let y = &node.value;
                    let x = self.value(*a);
                    let mut ga = Array2::zeros(y.raw_dim());
                    for (r, mut out) in ga.rows_mut().into_iter().enumerate() {
                        let d = y.ncols() as f64;
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let xr = x.row(r);
                        let mean = xr.sum() / d;
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                        let floored = (1.0 / inv[r]).powi(2) > var * (1.0 + 1e-12) || var == 0.0;
                        let gmean = gr.sum() / d;
                        let gy = if floored {
                            0.0
                        } else {
                            gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / d
                        };
                        for ((o, gv), yv) in out.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                            *o = inv[r] * (gv - gmean - yv * gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, v| {
                        if *v <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Row(a, k) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.row_mut(*k).assign(&g.row(0));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let dim = self.value(*a).raw_dim();
                    let data: Vec<f64> = g.iter().copied().collect();
                    accumulate(&mut grads, *a, Array2::from_shape_vec(dim, data).expect("same size"));
                }
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

impl Tape {
    /// Adjoint of a leaf after [`Tape::backward`], zero when it did not
    /// influence the output.
    pub fn grad_of(&self, grads: &mut [Option<Array2<f64>>], v: Var) -> Array2<f64> {
        match grads[v.0].take() {
            Some(g) => g,
            None => Array2::zeros(self.value(v).raw_dim()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of `x`.
    fn fd(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut a = x.clone();
            let mut b = x.clone();
            a[[r, c]] += h;
            b[[r, c]] -= h;
            g[[r, c]] = (f(&a) - f(&b)) / (2.0 * h);
        }
        g
    }

    fn weighted_sum(v: &Array2<f64>) -> f64 {
        v.iter().enumerate().map(|(i, x)| x * (1.0 + i as f64 * 0.37).sin()).sum()
    }

    fn seed_for(v: &Array2<f64>) -> Array2<f64> {
        let mut s = v.clone();
        for (i, x) in s.iter_mut().enumerate() {
            *x = (1.0 + i as f64 * 0.37).sin();
        }
        s
    }

    fn build(x: &Array2<f64>, w: &Array2<f64>, tape: &mut Tape) -> (Var, Var, Var) {
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let q = tape.matmul(xv, wv);
        let s = tape.matmul_t(q, xv);
        let a = tape.softmax_rows(s);
        let av = tape.matmul(a, xv);
        let n = tape.standardize_rows(av, 1e-12);
        let gain = tape.leaf(array![[1.5, -0.5, 2.0]]);
        let m = tape.mul_row(n, gain);
        let m = tape.add_row(m, gain);
        let r = tape.relu(m);
        let r = tape.add(r, xv);
        let r = tape.mul_const(r, array![[1.0, 0.0, 2.0], [0.5, 1.0, 1.0]]);
        let r = tape.reshape(r, (3, 2));
        let out = tape.row(r, 1);
        (xv, wv, out)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let x = array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.6]];
        let w = array![[0.2, -0.3, 0.5], [0.9, 0.1, -0.4], [-0.7, 0.6, 0.3]];
        let mut tape = Tape::new();
        let (xv, wv, out) = build(&x, &w, &mut tape);
        let seed = seed_for(tape.value(out));
        let mut grads = tape.backward(out, seed);
        let gx = tape.grad_of(&mut grads, xv);
        let gw = tape.grad_of(&mut grads, wv);
        let eval = |x: &Array2<f64>, w: &Array2<f64>| {
            let mut t = Tape::new();
            let (_, _, o) = build(x, w, &mut t);
            weighted_sum(t.value(o))
        };
        let fx = fd(&x, |x| eval(x, &w));
        let fw = fd(&w, |w| eval(&x, w));
        for (a, b) in gx.iter().zip(fx.iter()).chain(gw.iter().zip(fw.iter())) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn standardize_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[2.0, 2.0, 2.0]]);
        let y = tape.standardize_rows(x, 1e-12);
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }
}
