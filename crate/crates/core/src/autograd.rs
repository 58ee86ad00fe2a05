//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Just enough operations to train the toy denoisers: products, element-wise
//! arithmetic with row broadcasting, the activations the mixers use, row
//! normalizations, row softmax and column slicing. Every node records its
//! value; [`Tape::backward`] walks the nodes in reverse creation order, which
//! is a valid topological order because inputs always precede outputs.
//!
//! Leaves created with [`Tape::constant`] never receive gradients, and no
//! gradient is computed for a subgraph that only depends on constants.

use crate::numerics::{gemm, logistic, softplus, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a bᵀ`
    MatMulNT(Var, Var),
    /// `aᵀ b`
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softplus(Var),
    Sigmoid(Var),
    Silu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    /// Row-wise standardize; saves the normalized rows and inverse std.
    LayerNorm(Var, Vec<f64>),
    /// Row-wise divide by RMS; saves the inverse RMS.
    RmsNorm(Var, Vec<f64>),
    RowSoftmax(Var),
    Transpose(Var),
    /// `a / col` with `col` an `n×1` vector broadcast across columns.
    DivCol(Var, Var),
    RowSum(Var),
    ColSum(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanSquare(Var),
    /// Sum of a list of 1×1 nodes.
    SumScalars(Vec<Var>),
    DecayMask(Var, Decay),
}

/// Which triangle [`Tape::decay_mask`] fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decay {
    /// `E_ij = Π_{k=j+1..=i} a_k` for `j ≤ i`.
    Forward,
    /// `E_ij = Π_{k=i..j} a_k` for `j ≥ i` (upper bound exclusive).
    Backward,
    /// [`Decay::Backward`] with the diagonal zeroed.
    BackwardStrict,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// The gradient, or zeros of the node's shape when none flowed.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(tape.value(v).rows(), tape.value(v).cols()))
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn row_broadcast(a: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(row.rows(), 1, "broadcast operand must be a row vector");
    assert_eq!(row.cols(), a.cols(), "broadcast width mismatch");
    let r = row.as_slice();
    let mut out = a.clone();
    for i in 0..out.rows() {
        for (v, b) in out.row_mut(i).iter_mut().zip(r) {
            *v = f(*v, *b);
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stops gradient flow: a constant holding `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = gemm(self.value(a), false, self.value(b), false).expect("tape matmul shapes");
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = gemm(self.value(a), false, self.value(b), true).expect("tape matmul shapes");
        self.binary(a, b, value, Op::MatMulNT(a, b))
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let value = gemm(self.value(a), true, self.value(b), false).expect("tape matmul shapes");
        self.binary(a, b, value, Op::MatMulTN(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("tape add shapes");
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b)).expect("tape sub shapes");
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b)).expect("tape mul shapes");
        self.binary(a, b, value, Op::Mul(a, b))
    }

    /// `a + row` with a 1×c `row` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = row_broadcast(self.value(a), self.value(row), |x, y| x + y);
        self.binary(a, row, value, Op::AddRow(a, row))
    }

    /// `a ⊙ row` with a 1×c `row` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = row_broadcast(self.value(a), self.value(row), |x, y| x * y);
        self.binary(a, row, value, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.unary(a, value, Op::Scale(a, s))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.unary(a, value, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(logistic);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|u| u * logistic(u));
        self.unary(a, value, Op::Silu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|u| if u >= 0.0 { u } else { slope * u });
        self.unary(a, value, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    /// Row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.unary(a, out, Op::LayerNorm(a, inv_std))
    }

    /// Row division by root-mean-square, no scale.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.cols() as f64;
        let mut out = x.clone();
        let mut inv_rms = Vec::with_capacity(x.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / c + eps).sqrt();
            for v in row.iter_mut() {
                *v *= inv;
            }
            inv_rms.push(inv);
        }
        self.unary(a, out, Op::RmsNorm(a, inv_rms))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = crate::numerics::row_softmax(self.value(a));
        self.unary(a, value, Op::RowSoftmax(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.unary(a, value, Op::Transpose(a))
    }

    /// `a / col` with `col` `n×1`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!(c.shape(), (x.rows(), 1), "div_col operand must be n×1");
        let mut out = x.clone();
        for r in 0..out.rows() {
            let d = c[(r, 0)];
            for v in out.row_mut(r) {
                *v /= d;
            }
        }
        self.binary(a, col, out, Op::DivCol(a, col))
    }

    /// `n×1` row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = Matrix::col_vector(&self.value(a).row_sums());
        self.unary(a, value, Op::RowSum(a))
    }

    /// `1×c` column sums.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let value = Matrix::row_vector(&self.value(a).col_sums());
        self.unary(a, value, Op::ColSum(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        self.unary(a, value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let values: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let value = Matrix::hconcat(&values).expect("concat rows");
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), needs)
    }

    /// `1×1` mean of squared entries.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let value = Matrix::row_vector(&[self.value(a).mean_square()]);
        self.unary(a, value, Op::MeanSquare(a))
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|&p| self.value(p)[(0, 0)]).sum::<f64>();
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Matrix::row_vector(&[total]), Op::SumScalars(parts.to_vec()), needs)
    }

    /// `n×n` products of forget gates between token pairs, from an `n×1`
    /// column of log-gates; entries outside the chosen triangle are zero.
    /// Sums run in log space one token at a time, so long spans neither
    /// underflow early nor lose relative precision.
    pub fn decay_mask(&mut self, log_gates: Var, kind: Decay) -> Var {
        let l = self.value(log_gates);
        assert_eq!(l.cols(), 1, "decay_mask takes an n×1 column");
        let n = l.rows();
        let l = l.as_slice();
        let mut e = Matrix::zeros(n, n);
        for i in 0..n {
            let row = e.row_mut(i);
            let mut s = 0.0;
            match kind {
                Decay::Forward => {
                    row[i] = 1.0;
                    for j in (0..i).rev() {
                        s += l[j + 1];
                        row[j] = s.exp();
                    }
                }
                Decay::Backward | Decay::BackwardStrict => {
                    row[i] = if kind == Decay::Backward { 1.0 } else { 0.0 };
                    for j in i + 1..n {
                        s += l[j - 1];
                        row[j] = s.exp();
                    }
                }
            }
        }
        self.unary(log_gates, e, Op::DecayMask(log_gates, kind))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::row_vector(&[1.0]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut send = |v: Var, grad: Matrix| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], grad);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    send(*a, gemm(g, false, self.value(*b), true).unwrap());
                }
                if self.needs(*b) {
                    send(*b, gemm(self.value(*a), true, g, false).unwrap());
                }
            }
            Op::MatMulNT(a, b) => {
                if self.needs(*a) {
                    send(*a, gemm(g, false, self.value(*b), false).unwrap());
                }
                if self.needs(*b) {
                    send(*b, gemm(g, true, self.value(*a), false).unwrap());
                }
            }
            Op::MatMulTN(a, b) => {
                if self.needs(*a) {
                    send(*a, gemm(self.value(*b), false, g, true).unwrap());
                }
                if self.needs(*b) {
                    send(*b, gemm(self.value(*a), false, g, false).unwrap());
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    send(*a, g.hadamard(self.value(*b)).unwrap());
                }
                if self.needs(*b) {
                    send(*b, g.hadamard(self.value(*a)).unwrap());
                }
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                if self.needs(*row) {
                    send(*row, Matrix::row_vector(&g.col_sums()));
                }
            }
            Op::MulRow(a, row) => {
                if self.needs(*a) {
                    send(*a, row_broadcast(g, self.value(*row), |x, y| x * y));
                }
                if self.needs(*row) {
                    let prod = g.hadamard(self.value(*a)).unwrap();
                    send(*row, Matrix::row_vector(&prod.col_sums()));
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::Softplus(a) => {
                send(*a, g.zip_map_unchecked(self.value(*a), |gv, u| gv * logistic(u)));
            }
            Op::Sigmoid(a) => send(*a, g.zip_map_unchecked(y, |gv, s| gv * s * (1.0 - s))),
            Op::Silu(a) => {
                send(
                    *a,
                    g.zip_map_unchecked(self.value(*a), |gv, u| {
                        let s = logistic(u);
                        gv * (s + u * s * (1.0 - s))
                    }),
                );
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                send(
                    *a,
                    g.zip_map_unchecked(self.value(*a), |gv, u| if u >= 0.0 { gv } else { slope * gv }),
                );
            }
            Op::Exp(a) => send(*a, g.zip_map_unchecked(y, |gv, e| gv * e)),
            Op::LayerNorm(a, inv_std) => {
                let c = y.cols() as f64;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().sum::<f64>() / c;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                send(*a, dx);
            }
            Op::RmsNorm(a, inv_rms) => {
                let c = y.cols() as f64;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c;
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = inv_rms[r] * (gv - yv * mean_gy);
                    }
                }
                send(*a, dx);
            }
            Op::RowSoftmax(a) => {
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
                    for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*a, dx);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::DivCol(a, col) => {
                let c = self.value(*col);
                if self.needs(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let d = c[(r, 0)];
                        for v in da.row_mut(r) {
                            *v /= d;
                        }
                    }
                    send(*a, da);
                }
                if self.needs(*col) {
                    // d(a/c)/dc = -(a/c)/c = -y/c
                    let dc: Vec<f64> = (0..y.rows())
                        .map(|r| {
                            let s: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                            -s / c[(r, 0)]
                        })
                        .collect();
                    send(*col, Matrix::col_vector(&dc));
                }
            }
            Op::RowSum(a) => {
                let (rows, cols) = self.value(*a).shape();
                send(*a, Matrix::from_fn(rows, cols, |r, _| g[(r, 0)]));
            }
            Op::ColSum(a) => {
                let (rows, cols) = self.value(*a).shape();
                send(*a, Matrix::from_fn(rows, cols, |_, c| g[(0, c)]));
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let (start, len) = (*start, g.cols());
                send(
                    *a,
                    Matrix::from_fn(rows, cols, |r, c| {
                        if c >= start && c < start + len {
                            g[(r, c - start)]
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        send(p, g.slice_cols(offset, w));
                    }
                    offset += w;
                }
            }
            Op::MeanSquare(a) => {
                let x = self.value(*a);
                let k = 2.0 * g[(0, 0)] / x.len() as f64;
                send(*a, x.scale(k));
            }
            Op::SumScalars(parts) => {
                for &p in parts {
                    send(p, g.clone());
                }
            }
            Op::DecayMask(l, kind) => {
                // E_ij depends on l_k for every k strictly inside its span, so
                // dl_k collects G⊙E over all (i, j) pairs whose span covers k.
                let n = y.rows();
                let mut dl = vec![0.0; n];
                for i in 0..n {
                    let (er, gr) = (y.row(i), g.row(i));
                    match kind {
                        Decay::Forward => {
                            // span of (i, j) with j < i is k in j+1..=i
                            let mut prefix = 0.0;
                            for k in 1..=i {
                                prefix += gr[k - 1] * er[k - 1];
                                dl[k] += prefix;
                            }
                        }
                        Decay::Backward | Decay::BackwardStrict => {
                            // span of (i, j) with j > i is k in i..j
                            let mut suffix = 0.0;
                            for k in (i..n.saturating_sub(1)).rev() {
                                suffix += gr[k + 1] * er[k + 1];
                                dl[k] += suffix;
                            }
                        }
                    }
                }
                send(*l, Matrix::col_vector(&dl));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_gaussian, Seed};

    /// Central-difference check of d(loss)/d(leaf) for every entry of one leaf.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, x0: Matrix, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get_or_zeros(x, &tape);
        let eps = 1e-6;
        for k in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xs = x0.clone();
                xs.as_mut_slice()[k] += delta;
                let mut t = Tape::new();
                let v = t.param(xs);
                let l = build(&mut t, v);
                t.value(l)[(0, 0)]
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.as_slice()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < tol, "entry {k}: analytic {a}, numeric {numeric}");
        }
    }

    #[test]
    fn matmul_and_broadcast_gradients() {
        let w = seeded_gaussian(3, 4, Seed(1));
        let row = seeded_gaussian(1, 4, Seed(2));
        check(
            |t, x| {
                let w = t.constant(w.clone());
                let r = t.constant(row.clone());
                let h = t.matmul(x, w);
                let h = t.add_row(h, r);
                let h = t.mul_row(h, r);
                t.mean_square(h)
            },
            seeded_gaussian(5, 3, Seed(3)),
            1e-7,
        );
    }

    #[test]
    fn activation_gradients() {
        check(
            |t, x| {
                let a = t.softplus(x);
                let b = t.silu(x);
                let c = t.sigmoid(x);
                let d = t.leaky_relu(x, 0.1);
                let e = t.exp(x);
                let s = t.add(a, b);
                let s = t.mul(s, c);
                let s = t.sub(s, d);
                let s = t.add(s, e);
                t.mean_square(s)
            },
            seeded_gaussian(4, 3, Seed(4)),
            1e-6,
        );
    }

    #[test]
    fn normalization_gradients() {
        let target = seeded_gaussian(4, 6, Seed(5));
        check(
            |t, x| {
                let tg = t.constant(target.clone());
                let a = t.layer_norm(x, 1e-5);
                let b = t.rms_norm(x, 1e-6);
                let c = t.row_softmax(x);
                let s = t.add(a, b);
                let s = t.add(s, c);
                let s = t.mul(s, tg);
                t.mean_square(s)
            },
            seeded_gaussian(4, 6, Seed(6)),
            1e-6,
        );
    }

    #[test]
    fn structural_gradients() {
        check(
            |t, x| {
                let sp = t.softplus(x);
                let sums = t.row_sum(sp);
                let normed = t.div_col(x, sums);
                let top = t.transpose(normed);
                let cs = t.col_sum(x);
                let left = t.slice_cols(x, 0, 2);
                let right = t.slice_cols(x, 2, 3);
                let cat = t.concat_cols(&[right, left]);
                let a = t.mean_square(top);
                let b = t.mean_square(cs);
                let c = t.mean_square(cat);
                let x2 = t.scale(x, -0.5);
                let d = t.mean_square(x2);
                t.sum_scalars(&[a, b, c, d])
            },
            seeded_gaussian(3, 5, Seed(7)),
            1e-6,
        );
    }

    #[test]
    fn transposed_product_gradients() {
        let w = seeded_gaussian(4, 3, Seed(10));
        check(
            |t, x| {
                let w = t.constant(w.clone());
                let a = t.matmul_nt(x, w);
                let b = t.matmul_tn(x, a);
                t.mean_square(b)
            },
            seeded_gaussian(4, 3, Seed(11)),
            1e-6,
        );
    }

    #[test]
    fn decay_mask_gradients() {
        let weights = seeded_gaussian(6, 6, Seed(12));
        for kind in [Decay::Forward, Decay::Backward, Decay::BackwardStrict] {
            check(
                |t, x| {
                    let w = t.constant(weights.clone());
                    let neg = t.scale(x, -1.0);
                    let logs = t.softplus(neg);
                    let logs = t.scale(logs, -1.0);
                    let e = t.decay_mask(logs, kind);
                    let e = t.mul(e, w);
                    t.mean_square(e)
                },
                seeded_gaussian(6, 1, Seed(13)),
                1e-6,
            );
        }
    }

    #[test]
    fn decay_mask_matches_gate_products() {
        let a = [0.9, 0.5, 0.8, 0.25, 0.6];
        let mut t = Tape::new();
        let logs = t.constant(Matrix::col_vector(&a.map(f64::ln)));
        let fwd = t.decay_mask(logs, Decay::Forward);
        let bwd = t.decay_mask(logs, Decay::Backward);
        let strict = t.decay_mask(logs, Decay::BackwardStrict);
        let expect_fwd = crate::oracle::cumprod_causal_mask(&a);
        let expect_fwd = expect_fwd.scalar_values().unwrap();
        assert!(t.value(fwd).max_abs_diff(expect_fwd) < 1e-15);
        let n = a.len();
        for i in 0..n {
            for j in 0..n {
                let p: f64 = if j >= i { a[i..j].iter().product() } else { 0.0 };
                assert!((t.value(bwd)[(i, j)] - p).abs() < 1e-15);
                let p = if i == j { 0.0 } else { p };
                assert!((t.value(strict)[(i, j)] - p).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constants_and_detached_nodes_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(seeded_gaussian(2, 2, Seed(8)));
        let c = t.constant(seeded_gaussian(2, 2, Seed(9)));
        let y = t.mul(x, c);
        let stopped = t.detach(y);
        let z = t.add(y, stopped);
        let loss = t.mean_square(z);
        let g = t.backward(loss);
        assert!(g.get(c).is_none());
        assert!(g.get(stopped).is_none());
        assert!(g.get(x).is_some());
    }
}
