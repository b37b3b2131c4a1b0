//! Minimal reverse-mode automatic differentiation over dense 2D tensors,
//! plus the Adam optimizer state. This is the substrate the localizer model
//! is built on: a per-step tape of primitive ops, each with a recorded
//! backward rule.
//!
//! Training instantiates everything at `f32`; gradient checks instantiate
//! the same code at `f64` against central finite differences.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use num_traits::{Float, FromPrimitive};
use thiserror::Error;

use crate::grid::OneHotCode;

/// Element type of the computation graph.
pub trait Real: Float + FromPrimitive + Debug + Default + 'static {
    fn cast(x: f64) -> Self {
        FromPrimitive::from_f64(x).expect("f64 conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Probability floor applied before logs in the cross-entropy loss.
pub const PROB_FLOOR: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;
// Row sums of cross-entropy inputs must be within this of 1. Looser than the
// contract's 1e-5 so legitimate f32 rounding on wide rows cannot trip it.
const ROW_SUM_TOL: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("{op}: incompatible shapes {a:?} and {b:?}")]
    ShapeMismatch { op: &'static str, a: (usize, usize), b: (usize, usize) },
    #[error("{op}: axis {axis} out of range for rank-2 tensors")]
    BadAxis { op: &'static str, axis: usize },
    #[error("{op}: slice [{start}, {start}+{len}) exceeds extent {extent}")]
    BadSlice { op: &'static str, start: usize, len: usize, extent: usize },
    #[error("concat requires at least one input")]
    EmptyConcat,
    #[error("cross-entropy target dimension {target} does not match class count {classes}")]
    TargetDimMismatch { target: usize, classes: usize },
    #[error("cross-entropy input row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("parameter '{0}' has no gradient; run backward first")]
    MissingGrad(String),
    #[error("parameter '{0}' already exists")]
    DuplicateParam(String),
}

/// Dense rank-2 tensor. Vectors are 1 x d rows; scalars are 1 x 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![R::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape {rows}x{cols} vs {} values", data.len());
        Tensor { rows, cols, data }
    }

    pub fn row(data: Vec<R>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(v: R) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    pub fn item(&self) -> R {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn transposed(&self) -> Tensor<R> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        transpose_into(&self.data, self.rows, self.cols, &mut out.data);
        out
    }
}

fn transpose_into<R: Real>(a: &[R], rows: usize, cols: usize, out: &mut [R]) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

// out += a(m x k) * b(k x n). The zero-skip makes one-hot rows cheap.
fn matmul_acc<R: Real>(a: &[R], m: usize, k: usize, b: &[R], n: usize, out: &mut [R]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == R::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Concat { axis: usize, parts: Vec<Var> },
    Mean { axis: usize, src: Var },
    Relu(Var),
    Softmax { axis: usize, src: Var },
    LayerNorm { src: Var, gain: Var, shift: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Linear { x: Var, w: Var, b: Var },
    Scale { src: Var, factor: f64 },
    Transpose(Var),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    CrossEntropy { probs: Var, target_col: usize },
}

struct Node<R> {
    value: Tensor<R>,
    grad: Option<Vec<R>>,
    op: Op,
    requires_grad: bool,
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One training step's computation tape.
pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    bindings: Vec<(String, Var)>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bindings: Vec::new() }
    }

    fn push(&mut self, value: Tensor<R>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf loaded from the store; `backward` fills its gradient
    /// and [`ParamStore::absorb_grads`] carries it back by name.
    pub fn param(&mut self, name: &str, store: &ParamStore<R>) -> Result<Var, GraphError> {
        let value =
            store.get(name).ok_or_else(|| GraphError::UnknownParam(name.to_owned()))?.clone();
        let var = self.push(value, Op::Leaf, true);
        self.bindings.push((name.to_owned(), var));
        Ok(var)
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(GraphError::ShapeMismatch { op: "matmul", a: (m, k), b: (k2, n) });
        }
        let mut out = Tensor::zeros(m, n);
        matmul_acc(self.nodes[a.0].value.data(), m, k, self.nodes[b.0].value.data(), n, &mut out.data);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        if self.shape(a) != self.shape(b) {
            return Err(GraphError::ShapeMismatch { op: "add", a: self.shape(a), b: self.shape(b) });
        }
        let (rows, cols) = self.shape(a);
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::Add(a, b), rg))
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::EmptyConcat);
        }
        if axis > 1 {
            return Err(GraphError::BadAxis { op: "concat", axis });
        }
        let first = self.shape(parts[0]);
        for &p in &parts[1..] {
            let s = self.shape(p);
            let ok = if axis == 0 { s.1 == first.1 } else { s.0 == first.0 };
            if !ok {
                return Err(GraphError::ShapeMismatch { op: "concat", a: first, b: s });
            }
        }
        let out = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
            let cols = first.1;
            let mut data = Vec::with_capacity(rows * cols);
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
            Tensor::from_vec(rows, cols, data)
        } else {
            let rows = first.0;
            let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
            let mut data = vec![R::zero(); rows * cols];
            let mut offset = 0usize;
            for &p in parts {
                let (pr, pc) = self.shape(p);
                let src = self.nodes[p.0].value.data();
                for i in 0..pr {
                    data[i * cols + offset..i * cols + offset + pc]
                        .copy_from_slice(&src[i * pc..(i + 1) * pc]);
                }
                offset += pc;
            }
            Tensor::from_vec(rows, cols, data)
        };
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat { axis, parts: parts.to_vec() }, rg))
    }

    pub fn mean_axis(&mut self, axis: usize, src: Var) -> Result<Var, GraphError> {
        if axis > 1 {
            return Err(GraphError::BadAxis { op: "mean", axis });
        }
        let (rows, cols) = self.shape(src);
        let data = self.nodes[src.0].value.data();
        let out = if axis == 0 {
            let inv = R::cast(1.0 / rows as f64);
            let mut acc = vec![R::zero(); cols];
            for i in 0..rows {
                for j in 0..cols {
                    acc[j] = acc[j] + data[i * cols + j];
                }
            }
            for a in acc.iter_mut() {
                *a = *a * inv;
            }
            Tensor::from_vec(1, cols, acc)
        } else {
            let inv = R::cast(1.0 / cols as f64);
            let mut acc = vec![R::zero(); rows];
            for i in 0..rows {
                let mut s = R::zero();
                for j in 0..cols {
                    s = s + data[i * cols + j];
                }
                acc[i] = s * inv;
            }
            Tensor::from_vec(rows, 1, acc)
        };
        let rg = self.needs(src);
        Ok(self.push(out, Op::Mean { axis, src }, rg))
    }

    pub fn relu(&mut self, src: Var) -> Result<Var, GraphError> {
        let (rows, cols) = self.shape(src);
        let data = self.nodes[src.0]
            .value
            .data()
            .iter()
            .map(|&x| if x > R::zero() { x } else { R::zero() })
            .collect();
        let rg = self.needs(src);
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::Relu(src), rg))
    }

    pub fn softmax_axis(&mut self, axis: usize, src: Var) -> Result<Var, GraphError> {
        if axis > 1 {
            return Err(GraphError::BadAxis { op: "softmax", axis });
        }
        let (rows, cols) = self.shape(src);
        let x = self.nodes[src.0].value.data();
        let mut out = vec![R::zero(); rows * cols];
        if axis == 1 {
            for i in 0..rows {
                softmax_slice(&x[i * cols..(i + 1) * cols], &mut out[i * cols..(i + 1) * cols]);
            }
        } else {
            let mut col = vec![R::zero(); rows];
            let mut res = vec![R::zero(); rows];
            for j in 0..cols {
                for i in 0..rows {
                    col[i] = x[i * cols + j];
                }
                softmax_slice(&col, &mut res);
                for i in 0..rows {
                    out[i * cols + j] = res[i];
                }
            }
        }
        let rg = self.needs(src);
        Ok(self.push(Tensor::from_vec(rows, cols, out), Op::Softmax { axis, src }, rg))
    }

    /// Per-row layer normalization over the feature (column) axis with
    /// learnable gain and shift, both `1 x cols`.
    pub fn layer_norm(&mut self, src: Var, gain: Var, shift: Var) -> Result<Var, GraphError> {
        let (rows, cols) = self.shape(src);
        for (v, what) in [(gain, "layer_norm gain"), (shift, "layer_norm shift")] {
            if self.shape(v) != (1, cols) {
                return Err(GraphError::ShapeMismatch { op: what, a: (rows, cols), b: self.shape(v) });
            }
        }
        let x = self.nodes[src.0].value.data();
        let g = self.nodes[gain.0].value.data();
        let s = self.nodes[shift.0].value.data();
        let mut out = vec![R::zero(); rows * cols];
        let mut normed = vec![0.0f64; rows * cols];
        let mut inv_std = vec![0.0f64; rows];
        for i in 0..rows {
            let row = &x[i * cols..(i + 1) * cols];
            let mean = row.iter().fold(0.0f64, |a, &v| a + v.to_f64().unwrap()) / cols as f64;
            let var = row
                .iter()
                .fold(0.0f64, |a, &v| {
                    let d = v.to_f64().unwrap() - mean;
                    a + d * d
                })
                / cols as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..cols {
                let xh = (row[j].to_f64().unwrap() - mean) * istd;
                normed[i * cols + j] = xh;
                out[i * cols + j] = R::cast(xh) * g[j] + s[j];
            }
        }
        let rg = self.needs(src) || self.needs(gain) || self.needs(shift);
        Ok(self.push(
            Tensor::from_vec(rows, cols, out),
            Op::LayerNorm { src, gain, shift, normed, inv_std },
            rg,
        ))
    }

    /// Affine map: `x (n x in) * w (in x out) + b (1 x out)` broadcast per row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, GraphError> {
        let (n, xin) = self.shape(x);
        let (win, wout) = self.shape(w);
        if xin != win {
            return Err(GraphError::ShapeMismatch { op: "linear", a: (n, xin), b: (win, wout) });
        }
        if self.shape(b) != (1, wout) {
            return Err(GraphError::ShapeMismatch { op: "linear bias", a: (win, wout), b: self.shape(b) });
        }
        let mut out = vec![R::zero(); n * wout];
        matmul_acc(self.nodes[x.0].value.data(), n, xin, self.nodes[w.0].value.data(), wout, &mut out);
        let bias = self.nodes[b.0].value.data();
        for i in 0..n {
            for j in 0..wout {
                out[i * wout + j] = out[i * wout + j] + bias[j];
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_vec(n, wout, out), Op::Linear { x, w, b }, rg))
    }

    pub fn scale(&mut self, src: Var, factor: f64) -> Result<Var, GraphError> {
        let (rows, cols) = self.shape(src);
        let f = R::cast(factor);
        let data = self.nodes[src.0].value.data().iter().map(|&x| x * f).collect();
        let rg = self.needs(src);
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::Scale { src, factor }, rg))
    }

    pub fn transpose(&mut self, src: Var) -> Result<Var, GraphError> {
        let t = self.nodes[src.0].value.transposed();
        let rg = self.needs(src);
        Ok(self.push(t, Op::Transpose(src), rg))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        let (rows, cols) = self.shape(src);
        if start + len > rows || len == 0 {
            return Err(GraphError::BadSlice { op: "slice_rows", start, len, extent: rows });
        }
        let data = self.nodes[src.0].value.data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.needs(src);
        Ok(self.push(Tensor::from_vec(len, cols, data), Op::SliceRows { src, start }, rg))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var, GraphError> {
        let (rows, cols) = self.shape(src);
        if start + len > cols || len == 0 {
            return Err(GraphError::BadSlice { op: "slice_cols", start, len, extent: cols });
        }
        let src_data = self.nodes[src.0].value.data();
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&src_data[i * cols + start..i * cols + start + len]);
        }
        let rg = self.needs(src);
        Ok(self.push(Tensor::from_vec(rows, len, data), Op::SliceCols { src, start }, rg))
    }

    /// Mean over rows of `-ln(max(p[row, target], floor))`; `probs` rows must
    /// already be normalized (softmax output).
    pub fn cross_entropy(&mut self, probs: Var, target: &OneHotCode) -> Result<Var, GraphError> {
        let (rows, cols) = self.shape(probs);
        if target.dim() != cols {
            return Err(GraphError::TargetDimMismatch { target: target.dim(), classes: cols });
        }
        let data = self.nodes[probs.0].value.data();
        for i in 0..rows {
            let sum: f64 =
                data[i * cols..(i + 1) * cols].iter().fold(0.0, |a, &v| a + v.to_f64().unwrap());
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(GraphError::NotNormalized { row: i, sum });
            }
        }
        let col = target.hot().get() - 1;
        let mut loss = 0.0f64;
        for i in 0..rows {
            let p = data[i * cols + col].to_f64().unwrap().max(PROB_FLOOR);
            loss -= p.ln();
        }
        loss /= rows as f64;
        let rg = self.needs(probs);
        Ok(self.push(Tensor::scalar(R::cast(loss)), Op::CrossEntropy { probs, target_col: col }, rg))
    }

    fn add_grad(&mut self, v: Var, delta: &[R]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![R::zero(); node.value.data().len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g = *g + d;
        }
    }

    /// Reverse pass from a scalar loss; accumulates gradients into every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<(), GraphError> {
        if self.shape(loss) != (1, 1) {
            return Err(GraphError::NonScalarLoss(self.shape(loss)));
        }
        self.nodes[loss.0].grad = Some(vec![R::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.clone() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.shape(a);
                    let n = self.shape(b).1;
                    if self.needs(a) {
                        // dA = dC * B^T
                        let bt = self.nodes[b.0].value.transposed();
                        let mut da = vec![R::zero(); m * k];
                        matmul_acc(&gout, m, n, bt.data(), k, &mut da);
                        self.add_grad(a, &da);
                    }
                    if self.needs(b) {
                        // dB = A^T * dC
                        let at = self.nodes[a.0].value.transposed();
                        let mut db = vec![R::zero(); k * n];
                        matmul_acc(at.data(), k, m, &gout, n, &mut db);
                        self.add_grad(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    self.add_grad(a, &gout);
                    self.add_grad(b, &gout);
                }
                Op::Concat { axis, parts } => {
                    let total_cols = self.shape(Var(idx)).1;
                    let mut row_off = 0usize;
                    let mut col_off = 0usize;
                    for p in parts {
                        let (pr, pc) = self.shape(p);
                        if axis == 0 {
                            self.add_grad(p, &gout[row_off * total_cols..(row_off + pr) * total_cols]);
                            row_off += pr;
                        } else {
                            let mut dp = Vec::with_capacity(pr * pc);
                            for i in 0..pr {
                                dp.extend_from_slice(
                                    &gout[i * total_cols + col_off..i * total_cols + col_off + pc],
                                );
                            }
                            self.add_grad(p, &dp);
                            col_off += pc;
                        }
                    }
                }
                Op::Mean { axis, src } => {
                    let (rows, cols) = self.shape(src);
                    let mut ds = vec![R::zero(); rows * cols];
                    if axis == 0 {
                        let inv = R::cast(1.0 / rows as f64);
                        for i in 0..rows {
                            for j in 0..cols {
                                ds[i * cols + j] = gout[j] * inv;
                            }
                        }
                    } else {
                        let inv = R::cast(1.0 / cols as f64);
                        for i in 0..rows {
                            for j in 0..cols {
                                ds[i * cols + j] = gout[i] * inv;
                            }
                        }
                    }
                    self.add_grad(src, &ds);
                }
                Op::Relu(src) => {
                    let ds: Vec<R> = self.nodes[src.0]
                        .value
                        .data()
                        .iter()
                        .zip(&gout)
                        .map(|(&x, &g)| if x > R::zero() { g } else { R::zero() })
                        .collect();
                    self.add_grad(src, &ds);
                }
                Op::Softmax { axis, src } => {
                    let (rows, cols) = self.shape(src);
                    let y = self.nodes[idx].value.data();
                    let mut ds = vec![R::zero(); rows * cols];
                    if axis == 1 {
                        for i in 0..rows {
                            let yr = &y[i * cols..(i + 1) * cols];
                            let gr = &gout[i * cols..(i + 1) * cols];
                            let dot =
                                yr.iter().zip(gr).fold(R::zero(), |a, (&yv, &gv)| a + yv * gv);
                            for j in 0..cols {
                                ds[i * cols + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                    } else {
                        for j in 0..cols {
                            let mut dot = R::zero();
                            for i in 0..rows {
                                dot = dot + y[i * cols + j] * gout[i * cols + j];
                            }
                            for i in 0..rows {
                                ds[i * cols + j] = y[i * cols + j] * (gout[i * cols + j] - dot);
                            }
                        }
                    }
                    self.add_grad(src, &ds);
                }
                Op::LayerNorm { src, gain, shift, normed, inv_std } => {
                    let (rows, cols) = self.shape(src);
                    let g = self.nodes[gain.0].value.data().to_vec();
                    if self.needs(gain) {
                        let mut dg = vec![R::zero(); cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                dg[j] = dg[j]
                                    + gout[i * cols + j] * R::cast(normed[i * cols + j]);
                            }
                        }
                        self.add_grad(gain, &dg);
                    }
                    if self.needs(shift) {
                        let mut dsh = vec![R::zero(); cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                dsh[j] = dsh[j] + gout[i * cols + j];
                            }
                        }
                        self.add_grad(shift, &dsh);
                    }
                    if self.needs(src) {
                        let mut ds = vec![R::zero(); rows * cols];
                        let inv_n = 1.0 / cols as f64;
                        for i in 0..rows {
                            // dxh_j = gout_j * gain_j; standard layer-norm chain
                            let mut sum_dxh = 0.0f64;
                            let mut sum_dxh_xh = 0.0f64;
                            for j in 0..cols {
                                let dxh = gout[i * cols + j].to_f64().unwrap()
                                    * g[j].to_f64().unwrap();
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * normed[i * cols + j];
                            }
                            for j in 0..cols {
                                let dxh = gout[i * cols + j].to_f64().unwrap()
                                    * g[j].to_f64().unwrap();
                                let xh = normed[i * cols + j];
                                let d = inv_std[i]
                                    * (dxh - inv_n * sum_dxh - xh * inv_n * sum_dxh_xh);
                                ds[i * cols + j] = R::cast(d);
                            }
                        }
                        self.add_grad(src, &ds);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (n, xin) = self.shape(x);
                    let wout = self.shape(w).1;
                    if self.needs(x) {
                        let wt = self.nodes[w.0].value.transposed();
                        let mut dx = vec![R::zero(); n * xin];
                        matmul_acc(&gout, n, wout, wt.data(), xin, &mut dx);
                        self.add_grad(x, &dx);
                    }
                    if self.needs(w) {
                        let xt = self.nodes[x.0].value.transposed();
                        let mut dw = vec![R::zero(); xin * wout];
                        matmul_acc(xt.data(), xin, n, &gout, wout, &mut dw);
                        self.add_grad(w, &dw);
                    }
                    if self.needs(b) {
                        let mut db = vec![R::zero(); wout];
                        for i in 0..n {
                            for j in 0..wout {
                                db[j] = db[j] + gout[i * wout + j];
                            }
                        }
                        self.add_grad(b, &db);
                    }
                }
                Op::Scale { src, factor } => {
                    let f = R::cast(factor);
                    let ds: Vec<R> = gout.iter().map(|&g| g * f).collect();
                    self.add_grad(src, &ds);
                }
                Op::Transpose(src) => {
                    let (rows, cols) = self.shape(src);
                    let mut ds = vec![R::zero(); rows * cols];
                    // gout has shape (cols, rows)
                    transpose_into(&gout, cols, rows, &mut ds);
                    self.add_grad(src, &ds);
                }
                Op::SliceRows { src, start } => {
                    let (rows, cols) = self.shape(src);
                    let len = self.shape(Var(idx)).0;
                    let mut ds = vec![R::zero(); rows * cols];
                    ds[start * cols..(start + len) * cols].copy_from_slice(&gout);
                    self.add_grad(src, &ds);
                }
                Op::SliceCols { src, start } => {
                    let (rows, cols) = self.shape(src);
                    let len = self.shape(Var(idx)).1;
                    let mut ds = vec![R::zero(); rows * cols];
                    for i in 0..rows {
                        ds[i * cols + start..i * cols + start + len]
                            .copy_from_slice(&gout[i * len..(i + 1) * len]);
                    }
                    self.add_grad(src, &ds);
                }
                Op::CrossEntropy { probs, target_col } => {
                    let (rows, cols) = self.shape(probs);
                    let p = self.nodes[probs.0].value.data();
                    let scale = gout[0].to_f64().unwrap() / rows as f64;
                    let mut dp = vec![R::zero(); rows * cols];
                    for i in 0..rows {
                        let pv = p[i * cols + target_col].to_f64().unwrap();
                        // matches the clamped forward: flat below the floor
                        if pv > PROB_FLOOR {
                            dp[i * cols + target_col] = R::cast(-scale / pv);
                        }
                    }
                    self.add_grad(probs, &dp);
                }
            }
        }
        Ok(())
    }
}

fn softmax_slice<R: Real>(x: &[R], out: &mut [R]) {
    let max = x.iter().fold(R::neg_infinity(), |a, &v| if v > a { v } else { a });
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).to_f64().unwrap().exp();
        sum += e;
        *o = R::cast(e);
    }
    let inv = R::cast(1.0 / sum);
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Adam hyperparameters. Paper leaves them unspecified; these are the usual
/// defaults except the learning rate, which the CLI exposes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct ParamEntry<R> {
    value: Tensor<R>,
    grad: Option<Vec<R>>,
    m: Vec<R>,
    v: Vec<R>,
    step: u64,
}

/// Named parameters with per-parameter Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<R> {
    entries: BTreeMap<String, ParamEntry<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<R>) -> Result<(), GraphError> {
        if self.entries.contains_key(name) {
            return Err(GraphError::DuplicateParam(name.to_owned()));
        }
        let len = value.data().len();
        self.entries.insert(
            name.to_owned(),
            ParamEntry { value, grad: None, m: vec![R::zero(); len], v: vec![R::zero(); len], step: 0 },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn grad_of(&self, name: &str) -> Option<&[R]> {
        self.entries.get(name).and_then(|e| e.grad.as_deref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.data().len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    /// Adam moments and step for checkpointing.
    pub fn adam_state(&self, name: &str) -> Option<(&[R], &[R], u64)> {
        self.entries.get(name).map(|e| (e.m.as_slice(), e.v.as_slice(), e.step))
    }

    pub fn set_adam_state(&mut self, name: &str, m: Vec<R>, v: Vec<R>, step: u64) -> Result<(), GraphError> {
        let e = self.entries.get_mut(name).ok_or_else(|| GraphError::UnknownParam(name.to_owned()))?;
        assert_eq!(m.len(), e.value.data().len(), "moment shape mismatch for {name}");
        assert_eq!(v.len(), e.value.data().len(), "moment shape mismatch for {name}");
        e.m = m;
        e.v = v;
        e.step = step;
        Ok(())
    }

    /// Pull gradients of bound parameters out of a graph after `backward`,
    /// summing over multiple bindings of the same name.
    pub fn absorb_grads(&mut self, graph: &Graph<R>) -> Result<(), GraphError> {
        for (name, var) in graph.bindings() {
            let entry = self
                .entries
                .get_mut(name.as_str())
                .ok_or_else(|| GraphError::UnknownParam(name.clone()))?;
            let g = graph.grad(*var);
            let slot =
                entry.grad.get_or_insert_with(|| vec![R::zero(); entry.value.data().len()]);
            if let Some(g) = g {
                for (dst, &src) in slot.iter_mut().zip(g) {
                    *dst = *dst + src;
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = None;
        }
    }

    /// Standard Adam update with bias correction; clears gradients and
    /// advances each parameter's step count.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<(), GraphError> {
        for (name, e) in self.entries.iter_mut() {
            let grad = e.grad.take().ok_or_else(|| GraphError::MissingGrad(name.clone()))?;
            e.step += 1;
            let b1 = R::cast(cfg.beta1);
            let b2 = R::cast(cfg.beta2);
            let one = R::one();
            let bc1 = R::cast(1.0 - cfg.beta1.powi(e.step as i32));
            let bc2 = R::cast(1.0 - cfg.beta2.powi(e.step as i32));
            let lr = R::cast(cfg.lr);
            let eps = R::cast(cfg.eps);
            for ((p, g), (m, v)) in e
                .value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(e.m.iter_mut().zip(e.v.iter_mut()))
            {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Central finite-difference gradients of `loss_fn` with respect to every
/// parameter in the store. The oracle half of the gradient check: it only
/// ever evaluates the loss, never the backward pass.
pub fn finite_diff_grads<R: Real>(
    store: &mut ParamStore<R>,
    eps: f64,
    mut loss_fn: impl FnMut(&ParamStore<R>) -> R,
) -> BTreeMap<String, Vec<R>> {
    let names: Vec<String> = store.entries.keys().cloned().collect();
    let mut out = BTreeMap::new();
    let h = R::cast(eps);
    for name in names {
        let len = store.get(&name).unwrap().data().len();
        let mut grads = Vec::with_capacity(len);
        for i in 0..len {
            let orig = store.get(&name).unwrap().data()[i];
            store.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = loss_fn(store);
            store.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = loss_fn(store);
            store.get_mut(&name).unwrap().data_mut()[i] = orig;
            grads.push((up - down) / (R::cast(2.0) * h));
        }
        out.insert(name, grads);
    }
    out
}
