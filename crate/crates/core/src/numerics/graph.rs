//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Operations are appended to the graph as they are called, so node order is
//! already a topological order; `backward` walks it once in reverse.

use std::sync::Arc;

use super::tensor::{check_temperature, gemm, gemm_nt, gemm_tn, log_softmax_slice, softmax_slice, Tensor};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;
const RMS_EPS: f64 = 1e-8;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sum(Var),
    MeanRows(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    L2NormalizeRows(Var),
    RmsNormRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf; it receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(Arc::new(tensor), Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(Arc::new(tensor), Op::Leaf, false)
    }

    /// Adds a shared parameter tensor as a differentiable leaf without copying it.
    pub fn param(&mut self, tensor: Arc<Tensor>) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    /// Adds a shared tensor as a constant leaf.
    pub fn frozen(&mut self, tensor: Arc<Tensor>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    /// A constant copy of `v`'s value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: (usize, usize), data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::matrix(shape.0, shape.1, data).expect("op output shape");
        self.push(Arc::new(value), op, rg)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::dim(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.record((m, n), out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let out = gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.record((m, n), out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let (m, n) = (t.rows(), t.cols());
        self.record((m, n), t.into_data(), Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(shape, out, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(shape, out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[1, n]` row to every row of `a [m, n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((m, n), (r, n2)) = (self.dims(a), self.dims(row));
        if r != 1 || n != n2 {
            return Err(Error::dim("add_row", format!("[{m}, {n}] + [{r}, {n2}]")));
        }
        let rv = self.value(row).data();
        let out = self.value(a).data().chunks(n).flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y)).collect();
        Ok(self.record((m, n), out, Op::AddRow(a, row), &[a, row]))
    }

    /// Scales row `i` of `a [m, n]` by `col[i]` for a `[m, 1]` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let ((m, n), (m2, c)) = (self.dims(a), self.dims(col));
        if c != 1 || m != m2 {
            return Err(Error::dim("mul_col", format!("[{m}, {n}] * [{m2}, {c}]")));
        }
        let cv = self.value(col).data();
        let out = self.value(a).data().chunks(n).zip(cv).flat_map(|(chunk, s)| chunk.iter().map(move |x| x * s)).collect();
        Ok(self.record((m, n), out, Op::MulCol(a, col), &[a, col]))
    }

    /// Divides every entry of `a` by the `[1, 1]` value `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(Error::dim("div_scalar", format!("divisor shape {:?}", self.dims(s))));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(a).data().iter().map(|x| x / sv).collect();
        Ok(self.record(self.dims(a), out, Op::DivScalar(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        self.record(self.dims(a), out, Op::Scale(a, c), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|x| x.tanh()).collect();
        self.record(self.dims(a), out, Op::Tanh(a), &[a])
    }

    /// Sum of all entries, as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.record((1, 1), vec![total], Op::Sum(a), &[a])
    }

    /// Column means: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return Err(Error::Contract("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; n];
        for chunk in self.value(a).data().chunks(n) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.record((1, n), out, Op::MeanRows(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let (m, n) = self.dims(a);
        let out = self.value(a).data().chunks(n).flat_map(|r| softmax_slice(r, temperature)).collect();
        Ok(self.record((m, n), out, Op::SoftmaxRows(a, temperature), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let (m, n) = self.dims(a);
        let out = self.value(a).data().chunks(n).flat_map(|r| log_softmax_slice(r, temperature)).collect();
        Ok(self.record((m, n), out, Op::LogSoftmaxRows(a, temperature), &[a]))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|r| {
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
                r.iter().map(move |x| x / norm)
            })
            .collect();
        self.record((m, n), out, Op::L2NormalizeRows(a), &[a])
    }

    /// Scale-free row normalisation `x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|r| {
                let rms = (r.iter().map(|x| x * x).sum::<f64>() / n as f64 + RMS_EPS).sqrt();
                r.iter().map(move |x| x / rms)
            })
            .collect();
        self.record((m, n), out, Op::RmsNormRows(a), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {m}")));
        }
        let src = self.value(a);
        let out = indices.iter().flat_map(|&i| src.row_slice(i).iter().copied()).collect();
        Ok(self.record((indices.len(), n), out, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        self.gather_rows(a, &[index])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let n = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::dim("concat_rows", format!("width {pn} vs {n}")));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.record((rows, n), out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let (m, n) = (node.value.rows(), node.value.cols());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.dims(*a).1;
                if self.wants(*a) {
                    let g = gemm_nt(dy, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, &g);
                }
                if self.wants(*b) {
                    let g = gemm_tn(self.value(*a).data(), dy, m, k, n);
                    self.accumulate(grads, *b, &g);
                }
            }
            Op::MatMulNt(a, b) => {
                let k = self.dims(*a).1;
                if self.wants(*a) {
                    let g = gemm(dy, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, &g);
                }
                if self.wants(*b) {
                    let g = gemm_tn(dy, self.value(*a).data(), m, n, k);
                    self.accumulate(grads, *b, &g);
                }
            }
            Op::Transpose(a) => {
                let g = Tensor::matrix(m, n, dy.to_vec()).expect("grad shape").transpose();
                self.accumulate(grads, *a, g.data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy);
                self.accumulate(grads, *b, dy);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy);
                if self.wants(*b) {
                    let g: Vec<f64> = dy.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, &g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let g = zip_slices(dy, self.value(*b).data(), |d, x| d * x);
                    self.accumulate(grads, *a, &g);
                }
                if self.wants(*b) {
                    let g = zip_slices(dy, self.value(*a).data(), |d, x| d * x);
                    self.accumulate(grads, *b, &g);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, dy);
                if self.wants(*row) {
                    let mut g = vec![0.0; n];
                    for chunk in dy.chunks(n) {
                        for (o, d) in g.iter_mut().zip(chunk) {
                            *o += d;
                        }
                    }
                    self.accumulate(grads, *row, &g);
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col).data();
                if self.wants(*a) {
                    let g: Vec<f64> = dy.chunks(n).zip(cv).flat_map(|(c, s)| c.iter().map(move |d| d * s)).collect();
                    self.accumulate(grads, *a, &g);
                }
                if self.wants(*col) {
                    let av = self.value(*a).data();
                    let g: Vec<f64> = dy.chunks(n).zip(av.chunks(n)).map(|(d, x)| zip_slices(d, x, |p, q| p * q).iter().sum()).collect();
                    self.accumulate(grads, *col, &g);
                }
            }
            Op::DivScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.wants(*a) {
                    let g: Vec<f64> = dy.iter().map(|d| d / sv).collect();
                    self.accumulate(grads, *a, &g);
                }
                if self.wants(*s) {
                    let dot: f64 = zip_slices(dy, self.value(*a).data(), |d, x| d * x).iter().sum();
                    self.accumulate(grads, *s, &[-dot / (sv * sv)]);
                }
            }
            Op::Scale(a, c) => {
                let g: Vec<f64> = dy.iter().map(|d| d * c).collect();
                self.accumulate(grads, *a, &g);
            }
            Op::Tanh(a) => {
                let g = zip_slices(dy, y, |d, t| d * (1.0 - t * t));
                self.accumulate(grads, *a, &g);
            }
            Op::Sum(a) => {
                let g = vec![dy[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, &g);
            }
            Op::MeanRows(a) => {
                let rows = self.dims(*a).0;
                let g: Vec<f64> = (0..rows).flat_map(|_| dy.iter().map(move |d| d / rows as f64)).collect();
                self.accumulate(grads, *a, &g);
            }
            Op::SoftmaxRows(a, t) => {
                let mut g = Vec::with_capacity(m * n);
                for (dr, yr) in dy.chunks(n).zip(y.chunks(n)) {
                    let inner: f64 = zip_slices(dr, yr, |d, p| d * p).iter().sum();
                    g.extend(dr.iter().zip(yr).map(|(d, p)| p * (d - inner) / t));
                }
                self.accumulate(grads, *a, &g);
            }
            Op::LogSoftmaxRows(a, t) => {
                let mut g = Vec::with_capacity(m * n);
                for (dr, yr) in dy.chunks(n).zip(y.chunks(n)) {
                    let total: f64 = dr.iter().sum();
                    g.extend(dr.iter().zip(yr).map(|(d, lp)| (d - lp.exp() * total) / t));
                }
                self.accumulate(grads, *a, &g);
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a).data();
                let mut g = Vec::with_capacity(m * n);
                for ((dr, yr), xr) in dy.chunks(n).zip(y.chunks(n)).zip(x.chunks(n)) {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
                    let inner: f64 = zip_slices(dr, yr, |d, p| d * p).iter().sum();
                    g.extend(dr.iter().zip(yr).map(|(d, p)| (d - p * inner) / norm));
                }
                self.accumulate(grads, *a, &g);
            }
            Op::RmsNormRows(a) => {
                let x = self.value(*a).data();
                let mut g = Vec::with_capacity(m * n);
                for ((dr, yr), xr) in dy.chunks(n).zip(y.chunks(n)).zip(x.chunks(n)) {
                    let rms = (xr.iter().map(|v| v * v).sum::<f64>() / n as f64 + RMS_EPS).sqrt();
                    let inner: f64 = zip_slices(dr, yr, |d, p| d * p).iter().sum::<f64>() / n as f64;
                    g.extend(dr.iter().zip(yr).map(|(d, p)| (d - p * inner) / rms));
                }
                self.accumulate(grads, *a, &g);
            }
            Op::GatherRows(a, indices) => {
                if self.wants(*a) {
                    let src_rows = self.dims(*a).0;
                    let slot = grads[a.0].get_or_insert_with(|| vec![0.0; src_rows * n]);
                    for (k, &i) in indices.iter().enumerate() {
                        for (o, d) in slot[i * n..(i + 1) * n].iter_mut().zip(&dy[k * n..(k + 1) * n]) {
                            *o += d;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, &dy[offset..offset + len]);
                    offset += len;
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    zip_slices(a.data(), b.data(), f)
}

fn zip_slices(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}
