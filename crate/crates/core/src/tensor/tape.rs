// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode tape. Every forward op appends a node holding its value and the
//! information its backward rule needs; `backward` replays nodes in reverse.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::rc::Rc;

use super::array::{matmul_kernel, matmul_nt_acc, matmul_tn_acc};
use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    ScaleVar(Var, Var),
    AddScalar(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    LogClamped(Var, f64),
    Relu(Var),
    Gelu(Var),
    NormCdf(Var),
    Sum(Var),
    Mean(Var),
    SumAxis0(Var),
    MeanAxis0(Var),
    SumAxis1(Var),
    Std(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    Pick(Var, Rc<[(usize, usize)]>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    SplitHeads { x: Var, seq_len: usize, heads: usize },
    MergeHeads { x: Var, seq_len: usize, heads: usize },
    Bmm(Var, Var),
    TransposeLast2(Var),
    MeanGroups(Var, usize),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Dynamic computation graph, rebuilt for every forward pass.
///
/// Ops take `&self`; nodes live behind a `RefCell`, so a tape is confined to
/// one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn gelu(x: f64) -> f64 {
    let u = (2.0 / PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = s * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows(data: &[f64], last: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, o) in data.chunks(last).zip(out.chunks_mut(last)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, &x) in o.iter_mut().zip(row) {
            *oi = (x - max).exp();
            s += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= s;
        }
    }
    out
}

fn logsumexp_rows(data: &[f64], last: usize) -> Vec<f64> {
    data.chunks(last)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            max + s.ln()
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let rg = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        Ok((ta, tb))
    }

    fn zip_map(&self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = self.same_shape(name, a, b)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, Tensor::from_parts(ta.shape().to_vec(), data), op, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let tb = self.value(b);
        if tb.data().contains(&0.0) {
            return Err(TensorError::Domain { op: "div", detail: "division by zero".into() });
        }
        self.zip_map("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a[m×n] + row[n]`, broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.last_dim();
        if tr.numel() != n {
            return Err(shape_err("add_row", format!("{:?} + {:?}", ta.shape(), tr.shape())));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, r) in chunk.iter_mut().zip(tr.data()) {
                *x += r;
            }
        }
        self.push("add_row", Tensor::from_parts(ta.shape().to_vec(), data), Op::AddRow(a, row), &[a, row])
    }

    /// `a[m×n] * row[n]`, broadcast over rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let n = ta.last_dim();
        if tr.numel() != n {
            return Err(shape_err("mul_row", format!("{:?} * {:?}", ta.shape(), tr.shape())));
        }
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, r) in chunk.iter_mut().zip(tr.data()) {
                *x *= r;
            }
        }
        self.push("mul_row", Tensor::from_parts(ta.shape().to_vec(), data), Op::MulRow(a, row), &[a, row])
    }

    /// Row `i` of `a[m×n]` multiplied by `w[i]`.
    pub fn scale_rows(&self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        let n = ta.last_dim();
        if ta.ndim() != 2 || tw.numel() != ta.rows() {
            return Err(shape_err("scale_rows", format!("{:?} by {:?}", ta.shape(), tw.shape())));
        }
        let mut data = ta.data().to_vec();
        for (chunk, &s) in data.chunks_mut(n).zip(tw.data()) {
            for x in chunk.iter_mut() {
                *x *= s;
            }
        }
        self.push("scale_rows", Tensor::from_parts(ta.shape().to_vec(), data), Op::ScaleRows(a, w), &[a, w])
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        self.push("scale", ta.map(|x| x * c), Op::Scale(a, c), &[a])
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Multiply every element of `a` by the scalar variable `s`.
    pub fn scale_by(&self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.numel() != 1 {
            return Err(shape_err("scale_by", format!("scalar expected, got {:?}", ts.shape())));
        }
        let c = ts.item();
        self.push("scale_by", ta.map(|x| x * c), Op::ScaleVar(a, s), &[a, s])
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        self.push("add_scalar", ta.map(|x| x + c), Op::AddScalar(a), &[a])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_kernel(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], data), Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() != 2 {
            return Err(shape_err("transpose", format!("{:?}", ta.shape())));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![n, m], data), Op::Transpose(a), &[a])
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        self.push("exp", ta.map(f64::exp), Op::Exp(a), &[a])
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.data().iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Domain { op: "log", detail: "non-positive argument".into() });
        }
        self.push("log", ta.map(f64::ln), Op::Log(a), &[a])
    }

    /// `log(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&self, a: Var, floor: f64) -> Result<Var> {
        let ta = self.value(a);
        self.push("log_clamped", ta.map(|x| x.max(floor).ln()), Op::LogClamped(a, floor), &[a])
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        self.push("relu", ta.map(|x| x.max(0.0)), Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        self.push("gelu", ta.map(gelu), Op::Gelu(a), &[a])
    }

    /// Elementwise standard normal CDF.
    pub fn norm_cdf(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        self.push("norm_cdf", ta.map(std_normal_cdf), Op::NormCdf(a), &[a])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let s = ta.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s: f64 = ta.data().iter().sum();
        self.push("mean", Tensor::scalar(s / ta.numel() as f64), Op::Mean(a), &[a])
    }

    fn check_2d(&self, op: &'static str, ta: &Tensor) -> Result<(usize, usize)> {
        if ta.ndim() != 2 {
            return Err(shape_err(op, format!("2-D expected, got {:?}", ta.shape())));
        }
        Ok((ta.shape()[0], ta.shape()[1]))
    }

    /// Column sums of `a[m×n]` → `[n]`.
    pub fn sum_axis0(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = self.check_2d("sum_axis0", &ta)?;
        let mut out = vec![0.0; n];
        for row in ta.data().chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        self.push("sum_axis0", Tensor::vector(out), Op::SumAxis0(a), &[a])
    }

    /// Column means of `a[m×n]` → `[n]`.
    pub fn mean_axis0(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = self.check_2d("mean_axis0", &ta)?;
        if m == 0 {
            return Err(shape_err("mean_axis0", "no rows".into()));
        }
        let mut out = vec![0.0; n];
        for row in ta.data().chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.push("mean_axis0", Tensor::vector(out), Op::MeanAxis0(a), &[a])
    }

    /// Row sums of `a[m×n]` → `[m]`.
    pub fn sum_axis1(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = self.check_2d("sum_axis1", &ta)?;
        let out = ta.data().chunks(n).map(|r| r.iter().sum()).collect();
        self.push("sum_axis1", Tensor::vector(out), Op::SumAxis1(a), &[a])
    }

    /// Population standard deviation over all elements.
    pub fn std(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.numel();
        if n == 0 {
            return Err(shape_err("std", "empty tensor".into()));
        }
        let mean = ta.data().iter().sum::<f64>() / n as f64;
        let var = ta.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        self.push("std", Tensor::scalar(var.sqrt()), Op::Std(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = softmax_rows(ta.data(), ta.last_dim());
        self.push("softmax", Tensor::from_parts(ta.shape().to_vec(), data), Op::Softmax(a), &[a])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let last = ta.last_dim();
        let lse = logsumexp_rows(ta.data(), last);
        let mut data = ta.data().to_vec();
        for (row, l) in data.chunks_mut(last).zip(&lse) {
            for x in row.iter_mut() {
                *x -= l;
            }
        }
        self.push("log_softmax", Tensor::from_parts(ta.shape().to_vec(), data), Op::LogSoftmax(a), &[a])
    }

    /// `log Σ exp` along the last axis → one value per row.
    pub fn logsumexp(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let lse = logsumexp_rows(ta.data(), ta.last_dim());
        self.push("logsumexp", Tensor::vector(lse), Op::LogSumExp(a), &[a])
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let last = ta.last_dim();
        let mut xhat = vec![0.0; ta.numel()];
        let mut inv_std = Vec::with_capacity(ta.outer_len());
        for (row, out) in ta.data().chunks(last).zip(xhat.chunks_mut(last)) {
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / last as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, x) in out.iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::from_parts(ta.shape().to_vec(), xhat.clone());
        self.push("layer_norm", value, Op::LayerNorm { x: a, xhat, inv_std }, &[a])
    }

    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = self.check_2d("gather_rows", &ta)?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(shape_err("gather_rows", format!("row {i} out of {m}")));
            }
            data.extend_from_slice(ta.row(i));
        }
        let op = Op::GatherRows(a, idx.into());
        self.push("gather_rows", Tensor::from_parts(vec![idx.len(), n], data), op, &[a])
    }

    /// Row `r` of `a` is added into row `idx[r]` of an `[rows×n]` zero matrix.
    pub fn scatter_add_rows(&self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = self.check_2d("scatter_add_rows", &ta)?;
        if idx.len() != m {
            return Err(shape_err("scatter_add_rows", format!("{} indices for {m} rows", idx.len())));
        }
        let mut data = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(shape_err("scatter_add_rows", format!("row {i} out of {rows}")));
            }
            for (o, x) in data[i * n..(i + 1) * n].iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        let op = Op::ScatterAddRows(a, idx.into());
        self.push("scatter_add_rows", Tensor::from_parts(vec![rows, n], data), op, &[a])
    }

    /// Elements `a[i, j]` for each `(i, j)` → vector.
    pub fn pick(&self, a: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = self.check_2d("pick", &ta)?;
        let mut data = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i >= m || j >= n {
                return Err(shape_err("pick", format!("({i},{j}) outside {m}x{n}")));
            }
            data.push(ta.data()[i * n + j]);
        }
        self.push("pick", Tensor::vector(data), Op::Pick(a, pairs.into()), &[a])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let first = tensors.first().ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let n = first.last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for t in &tensors {
            if t.ndim() != 2 || t.last_dim() != n {
                return Err(shape_err("concat_rows", format!("{:?} vs width {n}", t.shape())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push("concat_rows", Tensor::from_parts(vec![rows, n], data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = self.check_2d("slice_rows", &ta)?;
        if start + len > m {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {m}")));
        }
        let data = ta.data()[start * n..(start + len) * n].to_vec();
        self.push("slice_rows", Tensor::from_parts(vec![len, n], data), Op::SliceRows(a, start), &[a])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = (*self.value(a)).clone();
        let t = ta.reshaped(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape(a), &[a])
    }

    /// `[S·L, H·dh]` (S sequences of length L) → `[S·H, L, dh]`.
    pub fn split_heads(&self, a: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = self.check_2d("split_heads", &ta)?;
        if seq_len == 0 || n % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(shape_err("split_heads", format!("{n}x{d}, L={seq_len}, H={heads}")));
        }
        let (s, dh) = (n / seq_len, d / heads);
        let mut out = vec![0.0; n * d];
        for si in 0..s {
            for l in 0..seq_len {
                let src = &ta.data()[(si * seq_len + l) * d..(si * seq_len + l + 1) * d];
                for h in 0..heads {
                    let dst = ((si * heads + h) * seq_len + l) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let op = Op::SplitHeads { x: a, seq_len, heads };
        self.push("split_heads", Tensor::from_parts(vec![s * heads, seq_len, dh], out), op, &[a])
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&self, a: Var, heads: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() != 3 || heads == 0 || !ta.shape()[0].is_multiple_of(heads) {
            return Err(shape_err("merge_heads", format!("{:?}, H={heads}", ta.shape())));
        }
        let (bh, seq_len, dh) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let s = bh / heads;
        let d = heads * dh;
        let mut out = vec![0.0; ta.numel()];
        for si in 0..s {
            for l in 0..seq_len {
                let dst = (si * seq_len + l) * d;
                for h in 0..heads {
                    let src = ((si * heads + h) * seq_len + l) * dh;
                    out[dst + h * dh..dst + (h + 1) * dh].copy_from_slice(&ta.data()[src..src + dh]);
                }
            }
        }
        let op = Op::MergeHeads { x: a, seq_len, heads };
        self.push("merge_heads", Tensor::from_parts(vec![s * seq_len, d], out), op, &[a])
    }

    /// Batched matmul `[B,m,k] · [B,k,n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 3 || tb.ndim() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[1] {
            return Err(shape_err("bmm", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut data = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            let ai = &ta.data()[i * m * k..(i + 1) * m * k];
            let bi = &tb.data()[i * k * n..(i + 1) * k * n];
            data.extend(matmul_kernel(ai, bi, m, k, n));
        }
        self.push("bmm", Tensor::from_parts(vec![bs, m, n], data), Op::Bmm(a, b), &[a, b])
    }

    /// Swap the last two axes of a 3-D tensor.
    pub fn transpose_last2(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.ndim() != 3 {
            return Err(shape_err("transpose_last2", format!("{:?}", ta.shape())));
        }
        let (bs, m, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let mut data = vec![0.0; ta.numel()];
        for b in 0..bs {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[base + j * m + i] = ta.data()[base + i * n + j];
                }
            }
        }
        self.push("transpose_last2", Tensor::from_parts(vec![bs, n, m], data), Op::TransposeLast2(a), &[a])
    }

    /// Mean over consecutive blocks of `group` rows: `[G·group, n]` → `[G, n]`.
    pub fn mean_groups(&self, a: Var, group: usize) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = self.check_2d("mean_groups", &ta)?;
        if group == 0 || m % group != 0 {
            return Err(shape_err("mean_groups", format!("{m} rows in groups of {group}")));
        }
        let g = m / group;
        let mut out = vec![0.0; g * n];
        for (r, row) in ta.data().chunks(n).enumerate() {
            let o = &mut out[(r / group) * n..(r / group + 1) * n];
            for (oi, x) in o.iter_mut().zip(row) {
                *oi += x;
            }
        }
        for o in &mut out {
            *o /= group as f64;
        }
        self.push("mean_groups", Tensor::from_parts(vec![g, n], out), Op::MeanGroups(a, group), &[a])
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, n) = self.check_2d("l2_normalize_rows", &ta)?;
        let mut norms = Vec::with_capacity(ta.rows());
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::Domain { op: "l2_normalize_rows", detail: "zero row".into() });
            }
            for x in row.iter_mut() {
                *x /= norm;
            }
            norms.push(norm);
        }
        let op = Op::L2NormalizeRows { x: a, norms };
        self.push("l2_normalize_rows", Tensor::from_parts(ta.shape().to_vec(), data), op, &[a])
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = nodes.get(loss.0).ok_or(TensorError::NotOnTape)?;
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar { shape: root.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn wants(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |v: Var| &nodes[v.0].value;
    let like = |v: Var, data: Vec<f64>| Tensor::from_parts(val(v).shape().to_vec(), data);
    let gd = g.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, g.clone());
            acc(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                let d = gd.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                acc(nodes, grads, *a, like(*a, d));
            }
            if wants(nodes, *b) {
                let d = gd.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                acc(nodes, grads, *b, like(*b, d));
            }
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if wants(nodes, *a) {
                let d = gd.iter().zip(tb.data()).map(|(x, y)| x / y).collect();
                acc(nodes, grads, *a, like(*a, d));
            }
            if wants(nodes, *b) {
                let d = gd
                    .iter()
                    .zip(ta.data().iter().zip(tb.data()))
                    .map(|(x, (p, q))| -x * p / (q * q))
                    .collect();
                acc(nodes, grads, *b, like(*b, d));
            }
        }
        Op::AddRow(a, r) => {
            acc(nodes, grads, *a, g.clone());
            if wants(nodes, *r) {
                let n = g.last_dim();
                let mut d = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, x) in d.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                acc(nodes, grads, *r, like(*r, d));
            }
        }
        Op::MulRow(a, r) => {
            let (ta, tr) = (val(*a), val(*r));
            let n = g.last_dim();
            if wants(nodes, *a) {
                let mut d = gd.to_vec();
                for row in d.chunks_mut(n) {
                    for (x, s) in row.iter_mut().zip(tr.data()) {
                        *x *= s;
                    }
                }
                acc(nodes, grads, *a, like(*a, d));
            }
            if wants(nodes, *r) {
                let mut d = vec![0.0; n];
                for (grow, arow) in gd.chunks(n).zip(ta.data().chunks(n)) {
                    for ((o, x), y) in d.iter_mut().zip(grow).zip(arow) {
                        *o += x * y;
                    }
                }
                acc(nodes, grads, *r, like(*r, d));
            }
        }
        Op::ScaleRows(a, w) => {
            let (ta, tw) = (val(*a), val(*w));
            let n = g.last_dim();
            if wants(nodes, *a) {
                let mut d = gd.to_vec();
                for (row, s) in d.chunks_mut(n).zip(tw.data()) {
                    for x in row.iter_mut() {
                        *x *= s;
                    }
                }
                acc(nodes, grads, *a, like(*a, d));
            }
            if wants(nodes, *w) {
                let d = gd
                    .chunks(n)
                    .zip(ta.data().chunks(n))
                    .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                    .collect();
                acc(nodes, grads, *w, like(*w, d));
            }
        }
        Op::Scale(a, c) => acc(nodes, grads, *a, g.map(|x| x * c)),
        Op::ScaleVar(a, s) => {
            let (ta, ts) = (val(*a), val(*s));
            if wants(nodes, *a) {
                let c = ts.item();
                acc(nodes, grads, *a, g.map(|x| x * c));
            }
            if wants(nodes, *s) {
                let d: f64 = gd.iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                acc(nodes, grads, *s, like(*s, vec![d]));
            }
        }
        Op::AddScalar(a) => acc(nodes, grads, *a, g.clone()),
        Op::Matmul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if wants(nodes, *a) {
                let mut d = vec![0.0; m * k];
                matmul_nt_acc(gd, tb.data(), m, k, n, &mut d);
                acc(nodes, grads, *a, like(*a, d));
            }
            if wants(nodes, *b) {
                let mut d = vec![0.0; k * n];
                matmul_tn_acc(ta.data(), gd, m, k, n, &mut d);
                acc(nodes, grads, *b, like(*b, d));
            }
        }
        Op::Transpose(a) => {
            let (n, m) = (g.shape()[0], g.shape()[1]);
            let mut d = vec![0.0; m * n];
            for i in 0..n {
                for j in 0..m {
                    d[j * n + i] = gd[i * m + j];
                }
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::Exp(a) => {
            let d = gd.iter().zip(out.data()).map(|(x, y)| x * y).collect();
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::Log(a) => {
            let d = gd.iter().zip(val(*a).data()).map(|(x, y)| x / y).collect();
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::LogClamped(a, floor) => {
            let d = gd
                .iter()
                .zip(val(*a).data())
                .map(|(x, &y)| if y > *floor { x / y } else { 0.0 })
                .collect();
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::Relu(a) => {
            let d = gd.iter().zip(val(*a).data()).map(|(x, &y)| if y > 0.0 { *x } else { 0.0 }).collect();
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::Gelu(a) => {
            let d = gd.iter().zip(val(*a).data()).map(|(x, &y)| x * gelu_grad(y)).collect();
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::NormCdf(a) => {
            let d = gd.iter().zip(val(*a).data()).map(|(x, &y)| x * std_normal_pdf(y)).collect();
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::Sum(a) => {
            let ta = val(*a);
            acc(nodes, grads, *a, Tensor::full(ta.shape(), gd[0]));
        }
        Op::Mean(a) => {
            let ta = val(*a);
            acc(nodes, grads, *a, Tensor::full(ta.shape(), gd[0] / ta.numel() as f64));
        }
        Op::SumAxis0(a) | Op::MeanAxis0(a) => {
            let ta = val(*a);
            let m = ta.shape()[0];
            let scale = if matches!(nodes[id].op, Op::MeanAxis0(_)) { 1.0 / m as f64 } else { 1.0 };
            let mut d = Vec::with_capacity(ta.numel());
            for _ in 0..m {
                d.extend(gd.iter().map(|x| x * scale));
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::SumAxis1(a) => {
            let ta = val(*a);
            let n = ta.shape()[1];
            let mut d = Vec::with_capacity(ta.numel());
            for &x in gd {
                d.extend(std::iter::repeat_n(x, n));
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::Std(a) => {
            let ta = val(*a);
            let n = ta.numel() as f64;
            let s = out.item();
            let mean = ta.data().iter().sum::<f64>() / n;
            let d = if s > 0.0 {
                ta.data().iter().map(|x| gd[0] * (x - mean) / (n * s)).collect()
            } else {
                vec![0.0; ta.numel()]
            };
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::Softmax(a) => {
            let last = out.last_dim();
            let mut d = vec![0.0; out.numel()];
            for ((y, gr), dr) in out.data().chunks(last).zip(gd.chunks(last)).zip(d.chunks_mut(last)) {
                let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((o, p), q) in dr.iter_mut().zip(y).zip(gr) {
                    *o = p * (q - dot);
                }
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::LogSoftmax(a) => {
            let last = out.last_dim();
            let mut d = vec![0.0; out.numel()];
            for ((y, gr), dr) in out.data().chunks(last).zip(gd.chunks(last)).zip(d.chunks_mut(last)) {
                let s: f64 = gr.iter().sum();
                for ((o, ly), q) in dr.iter_mut().zip(y).zip(gr) {
                    *o = q - ly.exp() * s;
                }
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::LogSumExp(a) => {
            let ta = val(*a);
            let last = ta.last_dim();
            let p = softmax_rows(ta.data(), last);
            let mut d = p;
            for (row, &q) in d.chunks_mut(last).zip(gd) {
                for x in row.iter_mut() {
                    *x *= q;
                }
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::LayerNorm { x, xhat, inv_std } => {
            let last = out.last_dim();
            let mut d = vec![0.0; out.numel()];
            for (((gr, xr), dr), &is) in gd.chunks(last).zip(xhat.chunks(last)).zip(d.chunks_mut(last)).zip(inv_std)
            {
                let mg = gr.iter().sum::<f64>() / last as f64;
                let mgx = gr.iter().zip(xr).map(|(p, q)| p * q).sum::<f64>() / last as f64;
                for ((o, q), xh) in dr.iter_mut().zip(gr).zip(xr) {
                    *o = is * (q - mg - xh * mgx);
                }
            }
            acc(nodes, grads, *x, like(*x, d));
        }
        Op::GatherRows(a, idx) => {
            let ta = val(*a);
            let n = ta.last_dim();
            let mut d = vec![0.0; ta.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for (o, x) in d[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                    *o += x;
                }
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::ScatterAddRows(a, idx) => {
            let n = g.last_dim();
            let mut d = Vec::with_capacity(idx.len() * n);
            for &i in idx.iter() {
                d.extend_from_slice(&gd[i * n..(i + 1) * n]);
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::Pick(a, pairs) => {
            let ta = val(*a);
            let n = ta.last_dim();
            let mut d = vec![0.0; ta.numel()];
            for (k, &(i, j)) in pairs.iter().enumerate() {
                d[i * n + j] += gd[k];
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).numel();
                if wants(nodes, *p) {
                    acc(nodes, grads, *p, like(*p, gd[offset..offset + len].to_vec()));
                }
                offset += len;
            }
        }
        Op::SliceRows(a, start) => {
            let ta = val(*a);
            let n = ta.last_dim();
            let mut d = vec![0.0; ta.numel()];
            d[start * n..start * n + gd.len()].copy_from_slice(gd);
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::Reshape(a) => acc(nodes, grads, *a, like(*a, gd.to_vec())),
        Op::SplitHeads { x, seq_len, heads } => {
            let (seq_len, heads) = (*seq_len, *heads);
            let tx = val(*x);
            let (n, d) = (tx.shape()[0], tx.shape()[1]);
            let dh = d / heads;
            let mut out_g = vec![0.0; n * d];
            for si in 0..n / seq_len {
                for l in 0..seq_len {
                    let dst = (si * seq_len + l) * d;
                    for h in 0..heads {
                        let src = ((si * heads + h) * seq_len + l) * dh;
                        out_g[dst + h * dh..dst + (h + 1) * dh].copy_from_slice(&gd[src..src + dh]);
                    }
                }
            }
            acc(nodes, grads, *x, like(*x, out_g));
        }
        Op::MergeHeads { x, seq_len, heads } => {
            let (seq_len, heads) = (*seq_len, *heads);
            let tx = val(*x);
            let dh = tx.shape()[2];
            let d = heads * dh;
            let s = tx.shape()[0] / heads;
            let mut out_g = vec![0.0; tx.numel()];
            for si in 0..s {
                for l in 0..seq_len {
                    let src = (si * seq_len + l) * d;
                    for h in 0..heads {
                        let dst = ((si * heads + h) * seq_len + l) * dh;
                        out_g[dst..dst + dh].copy_from_slice(&gd[src + h * dh..src + (h + 1) * dh]);
                    }
                }
            }
            acc(nodes, grads, *x, like(*x, out_g));
        }
        Op::Bmm(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
            if wants(nodes, *a) {
                let mut d = vec![0.0; bs * m * k];
                for i in 0..bs {
                    matmul_nt_acc(
                        &gd[i * m * n..(i + 1) * m * n],
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut d[i * m * k..(i + 1) * m * k],
                    );
                }
                acc(nodes, grads, *a, like(*a, d));
            }
            if wants(nodes, *b) {
                let mut d = vec![0.0; bs * k * n];
                for i in 0..bs {
                    matmul_tn_acc(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        &gd[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut d[i * k * n..(i + 1) * k * n],
                    );
                }
                acc(nodes, grads, *b, like(*b, d));
            }
        }
        Op::TransposeLast2(a) => {
            let (bs, n, m) = (g.shape()[0], g.shape()[1], g.shape()[2]);
            let mut d = vec![0.0; g.numel()];
            for b in 0..bs {
                let base = b * m * n;
                for i in 0..n {
                    for j in 0..m {
                        d[base + j * n + i] = gd[base + i * m + j];
                    }
                }
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::MeanGroups(a, group) => {
            let ta = val(*a);
            let n = ta.last_dim();
            let mut d = Vec::with_capacity(ta.numel());
            for r in 0..ta.rows() {
                let gi = r / group;
                d.extend(gd[gi * n..(gi + 1) * n].iter().map(|x| x / *group as f64));
            }
            acc(nodes, grads, *a, like(*a, d));
        }
        Op::L2NormalizeRows { x, norms } => {
            let n = out.last_dim();
            let mut d = vec![0.0; out.numel()];
            for (((y, gr), dr), &nrm) in out.data().chunks(n).zip(gd.chunks(n)).zip(d.chunks_mut(n)).zip(norms) {
                let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                for ((o, p), q) in dr.iter_mut().zip(y).zip(gr) {
                    *o = (q - p * dot) / nrm;
                }
            }
            acc(nodes, grads, *x, like(*x, d));
        }
    }
}
