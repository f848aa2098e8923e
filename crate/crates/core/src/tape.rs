//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order, so the node list is
//! already topologically sorted. [`Tape::backward`] walks it in reverse and
//! accumulates vector-Jacobian products into one gradient buffer per node.

use crate::error::{CbsaError, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Log(Var),
    Pow(Var, f64),
    Gelu(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var, f64),
    L2NormRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    RowDot(Var, Var),
    Reshape(Var),
}

impl Op {
    fn for_each_parent(&self, mut f: impl FnMut(Var)) {
        match self {
            Op::Leaf => {}
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::RowDot(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Affine(x, _)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::Pow(x, _)
            | Op::Gelu(x)
            | Op::Clamp(x, _, _)
            | Op::SoftmaxRows(x, _)
            | Op::L2NormRows(x)
            | Op::Transpose(x)
            | Op::SliceRows(x, _)
            | Op::SliceCols(x, _)
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::Reshape(x) => f(*x),
            Op::LayerNorm { x, gain, bias } => {
                f(*x);
                f(*gain);
                f(*bias);
            }
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().for_each(|&p| f(p)),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Op-specific saved quantities (row norms, normalized activations).
    saved: Option<Tensor>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CbsaError::dim(format!(
            "{op} operands {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Option<Tensor>) -> Var {
        let mut requires_grad = false;
        op.for_each_parent(|p| requires_grad |= self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
            saved: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, None)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value, None))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims();
        let (n, k2) = tb.dims();
        if k != k2 {
            return Err(CbsaError::dim(format!(
                "matmul of {:?} by transpose of {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMulNt(a, b), value, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value, None))
    }

    /// Adds a length-`n` row vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (m, n) = tx.dims();
        if tr.len() != n {
            return Err(CbsaError::dim(format!(
                "row broadcast of {:?} onto {:?}",
                tr.shape(),
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (o, r) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *o += r;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(x, row), value, None))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(Op::Affine(x, scale), value, None)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), value, None)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(CbsaError::Domain(format!("log of non-positive value {bad}")));
        }
        let value = t.map(f64::ln);
        Ok(self.push(Op::Log(x), value, None))
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
            return Err(CbsaError::Domain(format!("pow of negative base {bad}")));
        }
        let value = t.map(|v| v.powf(exponent));
        Ok(self.push(Op::Pow(x, exponent), value, None))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(Op::Gelu(x), value, None)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(x, lo, hi), value, None)
    }

    /// Row-wise softmax of `x / temperature` with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(CbsaError::Contract(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let t = self.value(x);
        let (m, n) = t.dims();
        let mut out = t.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - max) / temperature).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(Op::SoftmaxRows(x, temperature), value, None))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims();
        let mut norms = Vec::with_capacity(m);
        let mut out = t.data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > MIN_ROW_NORM) {
                return Err(CbsaError::DegenerateRow {
                    row: i,
                    norm,
                    eps: MIN_ROW_NORM,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let saved = Tensor::vector(norms)?;
        Ok(self.push(Op::L2NormRows(x), value, Some(saved)))
    }

    /// Per-row layer normalization followed by an affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (t, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = t.dims();
        if n < 2 || g.len() != n || b.len() != n {
            return Err(CbsaError::dim(format!(
                "layer norm of {:?} with gain {:?} and bias {:?}",
                t.shape(),
                g.shape(),
                b.shape()
            )));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let mut saved_data = xhat;
        saved_data.extend(inv_std);
        let saved = Tensor::vector(saved_data)?;
        Ok(self.push(Op::LayerNorm { x, gain, bias }, value, Some(saved)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(Op::Transpose(x), value, None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| CbsaError::dim("concat of zero parts"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(CbsaError::dim(format!(
                    "row concat of width {} onto width {cols}",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, None))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| CbsaError::dim("concat of zero parts"))?;
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(CbsaError::dim(format!(
                    "column concat of height {} onto height {rows}",
                    t.rows()
                )));
            }
            cols += t.cols();
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                data[i * cols + offset..i * cols + offset + c].copy_from_slice(t.row(i));
            }
            offset += c;
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, None))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if len == 0 || start + len > t.rows() {
            return Err(CbsaError::dim(format!(
                "row slice {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let value = t.slice_rows(start, len);
        Ok(self.push(Op::SliceRows(x, start), value, None))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.dims();
        if len == 0 || start + len > n {
            return Err(CbsaError::dim(format!(
                "column slice {start}..{} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        Ok(self.push(Op::SliceCols(x, start), value, None))
    }

    /// Column-wise mean over rows: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = t.dims();
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (o, v) in data.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= m as f64);
        let value = Tensor::matrix(1, n, data).expect("non-empty row");
        self.push(Op::MeanRows(x), value, None)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value, None)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise inner products: `m x n, m x n -> m x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(CbsaError::dim(format!(
                "row dot of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let m = ta.rows();
        let data = (0..m)
            .map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let value = Tensor::matrix(m, 1, data)?;
        Ok(self.push(Op::RowDot(a, b), value, None))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value, None))
    }

    /// Gradients of the scalar `root` with respect to every node it depends on.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(CbsaError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape(), 1.0));

        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims();
                let n = tb.cols();
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_into(dy.data(), tb.data(), &mut da, m, n, k);
                    acc(*a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_into(ta.data(), dy.data(), &mut db, k, m, n);
                    acc(*b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a b^T, a: m x k, b: n x k
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims();
                let n = tb.rows();
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(dy.data(), tb.data(), &mut da, m, n, k);
                    acc(*a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if needs(b) {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_into(dy.data(), ta.data(), &mut db, n, m, k);
                    acc(*b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, dy.zip_map(self.value(*b), |g, v| g * v)?);
                acc(*b, dy.zip_map(self.value(*a), |g, v| g * v)?);
            }
            Op::AddRow(x, row) => {
                acc(*x, dy.clone());
                let (m, n) = dy.dims();
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for (o, g) in dr.iter_mut().zip(dy.row(i)) {
                        *o += g;
                    }
                }
                acc(*row, Tensor::new(self.value(*row).shape().to_vec(), dr)?);
            }
            Op::Affine(x, s) => acc(*x, dy.map(|g| g * s)),
            Op::Sigmoid(x) => acc(*x, dy.zip_map(y, |g, s| g * s * (1.0 - s))?),
            Op::Log(x) => acc(*x, dy.zip_map(self.value(*x), |g, v| g / v)?),
            Op::Pow(x, e) => {
                let e = *e;
                let dx = if e == 0.0 {
                    dy.map(|_| 0.0)
                } else {
                    dy.zip_map(self.value(*x), |g, v| g * e * v.powf(e - 1.0))?
                };
                acc(*x, dx);
            }
            Op::Gelu(x) => acc(*x, dy.zip_map(self.value(*x), |g, v| g * gelu_grad(v))?),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(
                    *x,
                    dy.zip_map(self.value(*x), |g, v| if v >= lo && v <= hi { g } else { 0.0 })?,
                );
            }
            Op::SoftmaxRows(x, temp) => {
                let (m, n) = y.dims();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot) / temp;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::L2NormRows(x) => {
                let norms = node.saved.as_ref().expect("norms saved");
                let (m, n) = y.dims();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row(i), dy.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let inv = 1.0 / norms.data()[i];
                    for j in 0..n {
                        dx[i * n + j] = (gr[j] - yr[j] * dot) * inv;
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::LayerNorm { x, gain, bias } => {
                let saved = node.saved.as_ref().expect("layer norm stats saved");
                let (m, n) = y.dims();
                let xhat = &saved.data()[..m * n];
                let inv_std = &saved.data()[m * n..];
                let g = self.value(*gain).data();
                let mut dx = vec![0.0; m * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    let gr = dy.row(i);
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let d = gr[j] * g[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = gr[j] * g[j];
                        dx[i * n + j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), dx)?);
                acc(*gain, Tensor::new(self.value(*gain).shape().to_vec(), dgain)?);
                acc(*bias, Tensor::new(self.value(*bias).shape().to_vec(), dbias)?);
            }
            Op::Transpose(x) => {
                let dx = dy.transpose();
                acc(*x, dx.reshape(self.value(*x).shape().to_vec())?);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let t = self.value(p);
                    let r = t.rows();
                    acc(p, dy.slice_rows(start, r).reshape(t.shape().to_vec())?);
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dy.dims();
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let c = t.cols();
                    let mut data = Vec::with_capacity(m * c);
                    for i in 0..m {
                        data.extend_from_slice(&dy.data()[i * total + offset..i * total + offset + c]);
                    }
                    acc(p, Tensor::new(t.shape().to_vec(), data)?);
                    offset += c;
                }
            }
            Op::SliceRows(x, start) => {
                let t = self.value(*x);
                let mut dx = Tensor::zeros(t.shape());
                let n = t.cols();
                dx.data_mut()[start * n..start * n + dy.len()].copy_from_slice(dy.data());
                acc(*x, dx);
            }
            Op::SliceCols(x, start) => {
                let t = self.value(*x);
                let mut dx = Tensor::zeros(t.shape());
                let (m, len) = dy.dims();
                for i in 0..m {
                    dx.row_mut(i)[*start..start + len].copy_from_slice(dy.row(i));
                }
                acc(*x, dx);
            }
            Op::MeanRows(x) => {
                let t = self.value(*x);
                let (m, n) = t.dims();
                let mut data = Vec::with_capacity(m * n);
                for _ in 0..m {
                    data.extend(dy.data().iter().map(|g| g / m as f64));
                }
                acc(*x, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::Sum(x) => {
                let g = dy.item();
                acc(*x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n) = ta.dims();
                let mut da = vec![0.0; m * n];
                let mut db = vec![0.0; m * n];
                for i in 0..m {
                    let g = dy.data()[i];
                    for j in 0..n {
                        da[i * n + j] = g * tb.data()[i * n + j];
                        db[i * n + j] = g * ta.data()[i * n + j];
                    }
                }
                acc(*a, Tensor::new(ta.shape().to_vec(), da)?);
                acc(*b, Tensor::new(tb.shape().to_vec(), db)?);
            }
            Op::Reshape(x) => acc(*x, dy.reshape(self.value(*x).shape().to_vec())?),
        }
        Ok(())
    }
}
