//! Reverse-mode differentiation over whole-matrix operations.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its value. [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints. Parameters are bound by name from a [`ParamStore`] so that the
//! gradient registry can be read back by name afterwards.

use std::collections::{BTreeMap, HashMap};

use super::ops::{gelu_grad_scalar, gelu_scalar, sigmoid, softmax_in_place};
use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScalarMul(Var, Var),
    OneMinus(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    RowNormalize { x: Var, sums: Vec<f64> },
    SymNormalize { x: Var, inv_sqrt: Vec<f64> },
    RowEntropy(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    MeanRows { x: Var, idx: Vec<usize> },
    ColMax { x: Var, argmax: Vec<usize> },
    ColMean(Var),
    PairScore(Var, Var),
    PairAggregate(Var, Var),
    LogMasked { x: Var, mask: Matrix },
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter as a differentiable leaf (once per tape).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?.clone();
        let v = self.variable(value);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names bound through [`Tape::param`].
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul {:?} x {:?}", va.shape(), vb.shape());
        let out = va.matmul_unchecked(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_transb(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_transb {:?} x {:?}^T", va.shape(), vb.shape());
        let out = va.matmul_transb(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulTransB(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise {op:?}");
        let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data).expect("shape preserved");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "add_row");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(vr.as_slice()) {
                *o += r;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x m` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((1, va.cols()), vr.shape(), "mul_row");
        let mut out = va.clone();
        for i in 0..out.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(vr.as_slice()) {
                *o *= r;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// `s * a` for a `1 x 1` node `s`.
    pub fn scalar_mul(&mut self, s: Var, a: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "scalar_mul expects a 1x1 scale");
        let k = self.value(s).item();
        let out = self.value(a).scale(k);
        let rg = self.rg(s) || self.rg(a);
        self.push(out, Op::ScalarMul(s, a), rg)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 - v);
        let rg = self.rg(a);
        self.push(out, Op::OneMinus(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Row softmax. Entries where `mask` is zero are excluded and come out as 0.
    /// Every row must keep at least one entry.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Matrix>) -> Var {
        let mut out = self.value(a).clone();
        let cols = out.cols();
        for i in 0..out.rows() {
            match mask {
                None => softmax_in_place(out.row_mut(i)),
                Some(m) => {
                    let keep: Vec<usize> = (0..cols).filter(|&j| m[(i, j)] != 0.0).collect();
                    assert!(!keep.is_empty(), "masked softmax row {i} has no entries");
                    let mut vals: Vec<f64> = keep.iter().map(|&j| out[(i, j)]).collect();
                    softmax_in_place(&mut vals);
                    let row = out.row_mut(i);
                    row.iter_mut().for_each(|v| *v = 0.0);
                    for (&j, v) in keep.iter().zip(vals) {
                        row[j] = v;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let n = va.cols() as f64;
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.rows());
        for i in 0..va.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * s);
            inv_std.push(s);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let sums = va.row_sums();
        let mut out = va.clone();
        for (i, &s) in sums.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(a);
        self.push(out, Op::RowNormalize { x: a, sums }, rg)
    }

    pub fn sym_normalize(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let inv_sqrt = super::ops::inv_sqrt_degrees(va)?;
        let out = Matrix::from_fn(va.rows(), va.cols(), |i, j| va[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SymNormalize { x: a, inv_sqrt }, rg))
    }

    /// Mean row entropy divided by `ln(cols)`; 0 when there is a single column.
    pub fn row_entropy(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Matrix::scalar(row_entropy_value(va));
        let rg = self.rg(a);
        self.push(out, Op::RowEntropy(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + vp.cols()].copy_from_slice(vp.row(i));
            }
            off += vp.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let va = self.value(a);
        assert!(start + width <= va.cols(), "slice_cols out of range");
        let out = Matrix::from_fn(va.rows(), width, |i, j| va[(i, start + j)]);
        let rg = self.rg(a);
        self.push(out, Op::SliceCols { x: a, start }, rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        let rg = self.rg(a);
        self.push(out, Op::GatherRows { x: a, idx: idx.to_vec() }, rg)
    }

    /// Mean of the listed rows as a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        assert!(!idx.is_empty(), "mean_rows over an empty set");
        let va = self.value(a);
        let mut out = Matrix::zeros(1, va.cols());
        for &i in idx {
            for (o, v) in out.row_mut(0).iter_mut().zip(va.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        out.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(a);
        self.push(out, Op::MeanRows { x: a, idx: idx.to_vec() }, rg)
    }

    /// Column-wise max over rows (first index wins ties).
    pub fn col_max(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Matrix::zeros(1, va.cols());
        let mut argmax = Vec::with_capacity(va.cols());
        for j in 0..va.cols() {
            let mut best = 0;
            for i in 1..va.rows() {
                if va[(i, j)] > va[(best, j)] {
                    best = i;
                }
            }
            out[(0, j)] = va[(best, j)];
            argmax.push(best);
        }
        let rg = self.rg(a);
        self.push(out, Op::ColMax { x: a, argmax }, rg)
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let idx: Vec<usize> = (0..va.rows()).collect();
        let mut out = Matrix::zeros(1, va.cols());
        for &i in &idx {
            for (o, v) in out.row_mut(0).iter_mut().zip(va.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / va.rows() as f64;
        out.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(a);
        self.push(out, Op::ColMean(a), rg)
    }

    /// `out[i][j] = sum_c q[i][c] * e[i*L + j][c]` for per-pair features `e` (`L*L x c`).
    pub fn pair_score(&mut self, q: Var, e: Var) -> Var {
        let (vq, ve) = (self.value(q), self.value(e));
        let l = vq.rows();
        assert_eq!(ve.shape(), (l * l, vq.cols()), "pair_score");
        let out = Matrix::from_fn(l, l, |i, j| {
            vq.row(i).iter().zip(ve.row(i * l + j)).map(|(a, b)| a * b).sum()
        });
        let rg = self.rg(q) || self.rg(e);
        self.push(out, Op::PairScore(q, e), rg)
    }

    /// `out[i][c] = sum_j w[i][j] * e[i*L + j][c]`.
    pub fn pair_aggregate(&mut self, w: Var, e: Var) -> Var {
        let (vw, ve) = (self.value(w), self.value(e));
        let l = vw.rows();
        assert_eq!(vw.cols(), l, "pair_aggregate weights must be square");
        assert_eq!(ve.rows(), l * l, "pair_aggregate features");
        let c = ve.cols();
        let mut out = Matrix::zeros(l, c);
        for i in 0..l {
            for j in 0..l {
                let a = vw[(i, j)];
                if a == 0.0 {
                    continue;
                }
                for (o, v) in out.row_mut(i).iter_mut().zip(ve.row(i * l + j)) {
                    *o += a * v;
                }
            }
        }
        let rg = self.rg(w) || self.rg(e);
        self.push(out, Op::PairAggregate(w, e), rg)
    }

    /// `ln(x)` where `mask` is nonzero, 0 elsewhere. Masked entries must be positive.
    pub fn log_masked(&mut self, a: Var, mask: &Matrix) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), mask.shape(), "log_masked");
        let out = Matrix::from_fn(va.rows(), va.cols(), |i, j| {
            if mask[(i, j)] != 0.0 {
                debug_assert!(va[(i, j)] > 0.0);
                va[(i, j)].ln()
            } else {
                0.0
            }
        });
        let rg = self.rg(a);
        self.push(out, Op::LogMasked { x: a, mask: mask.clone() }, rg)
    }

    /// Inverted dropout: zeroes each entry with probability `p`, scales survivors by `1/(1-p)`.
    pub fn dropout<R: rand::Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 - p;
        let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the output).
    pub fn backward_with(&self, output: Var, seed: Matrix) -> Gradients {
        assert_eq!(seed.shape(), self.shape(output), "backward seed shape");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Reverse pass from a `1 x 1` output with unit seed.
    pub fn backward(&self, output: Var) -> Gradients {
        self.backward_with(output, Matrix::scalar(1.0))
    }

    /// Gradients of every bound parameter, keyed by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Matrix> {
        self.bound
            .iter()
            .map(|(name, &v)| {
                let g = grads.get(v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.shape(v);
                    Matrix::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.matmul_transb(self.value(b)));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, self.value(a).matmul_transa(g));
                }
            }
            &Op::MatMulTransB(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.matmul_unchecked(self.value(b)));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.matmul_transa(self.value(a)));
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.hadamard(self.value(b)).expect("shape"));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.hadamard(self.value(a)).expect("shape"));
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s)),
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.rg(row) {
                    self.accumulate(grads, row, column_sums(g));
                }
            }
            &Op::MulRow(a, row) => {
                let vr = self.value(row);
                if self.rg(a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (o, r) in ga.row_mut(i).iter_mut().zip(vr.as_slice()) {
                            *o *= r;
                        }
                    }
                    self.accumulate(grads, a, ga);
                }
                if self.rg(row) {
                    let prod = g.hadamard(self.value(a)).expect("shape");
                    self.accumulate(grads, row, column_sums(&prod));
                }
            }
            &Op::ScalarMul(s, a) => {
                if self.rg(s) {
                    let d: f64 = g.as_slice().iter().zip(self.value(a).as_slice()).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, s, Matrix::scalar(d));
                }
                if self.rg(a) {
                    self.accumulate(grads, a, g.scale(self.value(s).item()));
                }
            }
            &Op::OneMinus(a) => self.accumulate(grads, a, g.scale(-1.0)),
            &Op::Gelu(a) => {
                let xa = self.value(a);
                let data = g.as_slice().iter().zip(xa.as_slice()).map(|(gi, &x)| gi * gelu_grad_scalar(x)).collect();
                self.accumulate(grads, a, Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            &Op::Sigmoid(a) => {
                let data = g.as_slice().iter().zip(y.as_slice()).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                self.accumulate(grads, a, Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"));
            }
            &Op::Softmax(a) => {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum();
                    for ((o, gi), yi) in ga.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yi * (gi - dot);
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = g.cols() as f64;
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (gr, yr) = (g.row(i), y.row(i));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for ((o, gi), yi) in ga.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[i] * (gi - mg - yi * mgy);
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::RowNormalize { x, sums } => {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(p, q)| p * q).sum();
                    for (o, gi) in ga.row_mut(i).iter_mut().zip(g.row(i)) {
                        *o = (gi - dot) / sums[i];
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::SymNormalize { x, inv_sqrt } => {
                let xv = self.value(*x);
                let n = xv.rows();
                let mut c = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let t = g[(i, j)] * xv[(i, j)];
                        c[i] += t * inv_sqrt[j];
                        c[j] += t * inv_sqrt[i];
                    }
                }
                let ga = Matrix::from_fn(n, n, |i, j| {
                    g[(i, j)] * inv_sqrt[i] * inv_sqrt[j] - 0.5 * c[i] * inv_sqrt[i].powi(3)
                });
                self.accumulate(grads, *x, ga);
            }
            &Op::RowEntropy(a) => {
                let xa = self.value(a);
                let (rows, cols) = xa.shape();
                let mut ga = Matrix::zeros(rows, cols);
                if cols > 1 {
                    let k = -g.item() / (rows as f64 * (cols as f64).ln());
                    for (o, &p) in ga.as_mut_slice().iter_mut().zip(xa.as_slice()) {
                        if p > 0.0 {
                            *o = k * (p.ln() + 1.0);
                        }
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        let gp = Matrix::from_fn(g.rows(), w, |i, j| g[(i, off + j)]);
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.shape(x);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, x, ga);
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::MeanRows { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut ga = Matrix::zeros(r, c);
                let inv = 1.0 / idx.len() as f64;
                for &i in idx {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(0)) {
                        *o += v * inv;
                    }
                }
                self.accumulate(grads, *x, ga);
            }
            Op::ColMax { x, argmax } => {
                let (r, c) = self.shape(*x);
                let mut ga = Matrix::zeros(r, c);
                for (j, &i) in argmax.iter().enumerate() {
                    ga[(i, j)] += g[(0, j)];
                }
                self.accumulate(grads, *x, ga);
            }
            &Op::ColMean(a) => {
                let (r, c) = self.shape(a);
                let inv = 1.0 / r as f64;
                let ga = Matrix::from_fn(r, c, |_, j| g[(0, j)] * inv);
                self.accumulate(grads, a, ga);
            }
            &Op::PairScore(q, e) => {
                let (vq, ve) = (self.value(q), self.value(e));
                let l = vq.rows();
                if self.rg(q) {
                    let mut gq = Matrix::zeros(l, vq.cols());
                    for i in 0..l {
                        for j in 0..l {
                            let gij = g[(i, j)];
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, v) in gq.row_mut(i).iter_mut().zip(ve.row(i * l + j)) {
                                *o += gij * v;
                            }
                        }
                    }
                    self.accumulate(grads, q, gq);
                }
                if self.rg(e) {
                    let mut ge = Matrix::zeros(ve.rows(), ve.cols());
                    for i in 0..l {
                        for j in 0..l {
                            let gij = g[(i, j)];
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, v) in ge.row_mut(i * l + j).iter_mut().zip(vq.row(i)) {
                                *o = gij * v;
                            }
                        }
                    }
                    self.accumulate(grads, e, ge);
                }
            }
            &Op::PairAggregate(w, e) => {
                let (vw, ve) = (self.value(w), self.value(e));
                let l = vw.rows();
                if self.rg(w) {
                    let gw = Matrix::from_fn(l, l, |i, j| {
                        g.row(i).iter().zip(ve.row(i * l + j)).map(|(a, b)| a * b).sum()
                    });
                    self.accumulate(grads, w, gw);
                }
                if self.rg(e) {
                    let mut ge = Matrix::zeros(ve.rows(), ve.cols());
                    for i in 0..l {
                        for j in 0..l {
                            let a = vw[(i, j)];
                            if a == 0.0 {
                                continue;
                            }
                            for (o, v) in ge.row_mut(i * l + j).iter_mut().zip(g.row(i)) {
                                *o = a * v;
                            }
                        }
                    }
                    self.accumulate(grads, e, ge);
                }
            }
            Op::LogMasked { x, mask } => {
                let xv = self.value(*x);
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| {
                    if mask[(i, j)] != 0.0 {
                        g[(i, j)] / xv[(i, j)]
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, ga);
            }
            &Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, Matrix::filled(r, c, g.item()));
            }
        }
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

pub(crate) fn row_entropy_value(a: &Matrix) -> f64 {
    let (rows, cols) = a.shape();
    if cols <= 1 || rows == 0 {
        return 0.0;
    }
    let h: f64 = a.as_slice().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h / (rows as f64 * (cols as f64).ln())
}
