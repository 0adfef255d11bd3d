//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes are created in topological order, so [`Tape::backward`]
//! walks the tape from the loss towards the leaves and accumulates
//! gradients additively across fan-out.
//!
//! Leaves come in two flavours: [`Tape::leaf`] values are tracked and
//! receive gradients, [`Tape::constant`] values are not. Gradients are only
//! propagated through nodes that depend on at least one tracked leaf.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{matmul_into, matmul_nt_acc, matmul_tn_acc, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m, n] + [n]`, the vector added to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    Softplus(Var),
    Square(Var),
    Powf(Var, f64),
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Var, Var),
    SliceCols { input: Var, start: usize },
    SelectRows { input: Var, rows: Vec<usize> },
    Im2col { input: Var, kernel: usize },
    AvgPool2(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn rank_err(op: &'static str, expected: usize, t: &Tensor) -> TensorError {
    TensorError::Rank {
        op,
        expected,
        shape: t.shape().to_vec(),
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.nodes[x.0].tracked;
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.nodes[a.0].tracked || self.nodes[b.0].tracked;
        self.push(value, op, tracked)
    }

    /// A tracked input: receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(a, b, value, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.binary(a, b, value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the length-`n` vector `bias` to every row of the `m×n` matrix `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.numel() != tx.shape()[1] {
            return Err(shape_err("add_row", tx, tb));
        }
        let n = tx.shape()[1];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.binary(x, bias, value, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.unary(x, value, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.unary(x, value, Op::AddScalar(x))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.unary(x, value, op)
    }

    /// `max(x, 0)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// `|x|`; the subgradient at exactly zero is zero.
    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, libm::fabs, Op::Abs(x))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// `xᵖ` for strictly positive inputs.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.map(x, |v| libm::pow(v, p), Op::Powf(x, p))
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.unary(x, Tensor::scalar(s), Op::Sum(x))
    }

    /// Arithmetic mean of every element.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: t.rank(),
            });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(reduced_shape(t.shape(), axis), out)?;
        let op = if mean {
            Op::MeanAxis { input: x, axis }
        } else {
            Op::SumAxis { input: x, axis }
        };
        Ok(self.unary(x, value, op))
    }

    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis(x, axis, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(rank_err("transpose", 2, t));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.unary(x, value, Op::Transpose(x)))
    }

    /// `[m, p] ∥ [m, q] → [m, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let (m, p, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let value = Tensor::new(vec![m, p + q], out)?;
        Ok(self.binary(a, b, value, Op::ConcatCols(a, b)))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(rank_err("slice_cols", 2, t));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        if len == 0 || start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        Ok(self.unary(x, value, Op::SliceCols { input: x, start }))
    }

    /// Gathers rows of a matrix; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(rank_err("select_rows", 2, t));
        }
        if rows.is_empty() {
            return Err(TensorError::InvalidShape(vec![0, t.shape()[1]]));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: r,
                    len: m,
                });
            }
            out.extend_from_slice(t.row(r));
        }
        let value = Tensor::new(vec![rows.len(), n], out)?;
        let op = Op::SelectRows {
            input: x,
            rows: rows.to_vec(),
        };
        Ok(self.unary(x, value, op))
    }

    /// Patch extraction for a same-padded `kernel×kernel` convolution.
    ///
    /// Input `[b, h, w, c]`, output `[b·h·w, kernel·kernel·c]` with columns
    /// ordered `(dy, dx, channel)`; out-of-image taps read zero.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(rank_err("im2col", 4, t));
        }
        if kernel % 2 == 0 {
            return Err(TensorError::InvalidShape(vec![kernel, kernel]));
        }
        let (b, h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let cols = kernel * kernel * c;
        let mut out = vec![0.0; b * h * w * cols];
        let d = t.data();
        let r = (kernel / 2) as isize;
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = ((bi * h + y) * w + xx) * cols;
                    for dy in 0..kernel {
                        let sy = y as isize + dy as isize - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..kernel {
                            let sx = xx as isize + dx as isize - r;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                            let dst = row + (dy * kernel + dx) * c;
                            out[dst..dst + c].copy_from_slice(&d[src..src + c]);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b * h * w, cols], out)?;
        Ok(self.unary(x, value, Op::Im2col { input: x, kernel }))
    }

    /// 2×2 average pooling with stride 2 over `[b, h, w, c]`; an odd
    /// trailing row or column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 4 || t.shape()[1] < 2 || t.shape()[2] < 2 {
            return Err(rank_err("avg_pool2", 4, t));
        }
        let (b, h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; b * oh * ow * c];
        let d = t.data();
        for bi in 0..b {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((bi * oh + y) * ow + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += 0.25 * d[s + ch];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, oh, ow, c], out)?;
        Ok(self.unary(x, value, Op::AvgPool2(x)))
    }

    /// `Σ (aᵢ − bᵢ)²` as a one-element tensor.
    pub fn squared_l2_distance(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.sum(sq))
    }

    /// Sign pattern of every kink-bearing operation (ReLU and abs inputs).
    ///
    /// Two evaluations of the same graph with equal signatures lie in the
    /// same smooth piece, which makes finite differences meaningful.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::Abs(x) = node.op {
                sig.extend(self.nodes[x.0].value.data().iter().map(|v| {
                    if *v > 0.0 {
                        1
                    } else if *v < 0.0 {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        sig
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let g = match node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let g = match (&node.op, node.tracked) {
                (Op::Leaf, true) => Some(
                    grads
                        .get_mut(idx)
                        .and_then(Option::take)
                        .unwrap_or_else(|| vec![0.0; node.value.numel()]),
                ),
                _ => None,
            };
            out.push(g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")));
        }
        Ok(Gradients { grads: out })
    }

    fn acc<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.acc(grads, a) {
                    matmul_nt_acc(g, tb.data(), ga, m, k, n);
                }
                if let Some(gb) = self.acc(grads, b) {
                    matmul_tn_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * tb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ta[i];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let n = self.value(bias).numel();
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, bias) {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % n] += v;
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += f * b);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Relu(x) => {
                let xin = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        if xin[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Abs(x) => {
                let xin = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        if xin[i] > 0.0 {
                            gx[i] += g[i];
                        } else if xin[i] < 0.0 {
                            gx[i] -= g[i];
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                let xin = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * sigmoid(xin[i]);
                    }
                }
            }
            Op::Square(x) => {
                let xin = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += 2.0 * xin[i] * g[i];
                    }
                }
            }
            Op::Powf(x, p) => {
                let xin = self.value(x).data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * p * libm::pow(xin[i], p - 1.0);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let (outer, len, inner) = axis_split(self.value(input).shape(), axis);
                let f = match op {
                    Op::MeanAxis { .. } => 1.0 / len as f64,
                    _ => 1.0,
                };
                if let Some(gx) = self.acc(grads, input) {
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for i in 0..inner {
                                gx[base + i] += f * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (out.shape()[1], out.shape()[0]);
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let m = out.shape()[0];
                let p = self.value(a).shape()[1];
                let q = self.value(b).shape()[1];
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        for j in 0..p {
                            ga[i * p + j] += g[i * (p + q) + j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..m {
                        for j in 0..q {
                            gb[i * q + j] += g[i * (p + q) + p + j];
                        }
                    }
                }
            }
            Op::SliceCols { input, start } => {
                let n = self.value(input).shape()[1];
                let (m, len) = (out.shape()[0], out.shape()[1]);
                if let Some(gx) = self.acc(grads, input) {
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::SelectRows { input, ref rows } => {
                let n = out.shape()[1];
                if let Some(gx) = self.acc(grads, input) {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += g[k * n + j];
                        }
                    }
                }
            }
            Op::Im2col { input, kernel } => {
                let s = self.value(input).shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let cols = kernel * kernel * c;
                let r = (kernel / 2) as isize;
                if let Some(gx) = self.acc(grads, input) {
                    for bi in 0..b {
                        for y in 0..h {
                            for xx in 0..w {
                                let row = ((bi * h + y) * w + xx) * cols;
                                for dy in 0..kernel {
                                    let sy = y as isize + dy as isize - r;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..kernel {
                                        let sx = xx as isize + dx as isize - r;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        let dst = ((bi * h + sy as usize) * w + sx as usize) * c;
                                        let src = row + (dy * kernel + dx) * c;
                                        for ch in 0..c {
                                            gx[dst + ch] += g[src + ch];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool2(x) => {
                let s = self.value(x).shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (oh, ow) = (h / 2, w / 2);
                if let Some(gx) = self.acc(grads, x) {
                    for bi in 0..b {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let o = ((bi * oh + y) * ow + xx) * c;
                                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    let t = ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                                    for ch in 0..c {
                                        gx[t + ch] += 0.25 * g[o + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`]: one gradient per tracked leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `d loss / d v` for a tracked leaf `v`. Leaves that the loss does not
    /// reach get a zero gradient.
    pub fn get(&self, v: Var) -> Result<&Tensor, TensorError> {
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .ok_or(TensorError::Detached(v.0))
    }
}
