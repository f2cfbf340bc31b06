//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, pushes its result as a new node and returns a [`Var`] handle.
//! Inputs of node `k` always have ids `< k`, so insertion order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Graphs are rebuilt for every forward pass. Calling `backward` does not
//! consume the graph; it can be called repeatedly on different scalar nodes
//! of the same graph (the gradient probe relies on this).

use crate::error::{LabError, Result};
use crate::stats::exact_sum;
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Scalar,
    /// Right operand is a row vector repeated over every row of the left.
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `exact` marks a correctly rounded inner reduction.
    MatMul(Var, Var, bool),
    Binary(BinaryOp, Var, Var, Broadcast),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Normalize {
        x: Var,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b, _) | Op::Binary(_, a, b, _) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Normalize { x, .. }
            | Op::Transpose(x)
            | Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Gather { x, .. }
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(_, _, false) => "matmul",
            Op::MatMul(_, _, true) => "matmul_exact",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Normalize { .. } => "normalize",
            Op::Transpose(..) => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::Gather { .. } => "gather",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one [`Graph::backward`] call, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` when the node does not
    /// require gradients or the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn inputs(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    fn push(&mut self, op: Op, value: Tensor, leaf_grad: bool) -> Var {
        let requires_grad = match &op {
            Op::Leaf => leaf_grad,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product whose inner sums are correctly rounded, so permuting
    /// the inner index (columns of `a` with rows of `b`) leaves the result
    /// bitwise unchanged. Used where the inner index runs over the batch.
    pub fn matmul_exact(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, exact: bool) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(LabError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out = if exact {
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    out.push(exact_sum((0..k).map(|p| ad[i * k + p] * bd[p * n + j])));
                }
            }
            out
        } else {
            matmul_raw(ad, bd, m, k, n)
        };
        Ok(self.push(
            Op::MatMul(a, b, exact),
            Tensor::from_parts(vec![m, n], out),
            false,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `a op b` where `b` has the shape of `a`, is a scalar, or is a row
    /// vector matching the last axis of `a`.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = broadcast_kind(op_label(op), av, bv)?;
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let bd = bv.data();
        let c = bd.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => bd[i],
                    Broadcast::Scalar => bd[0],
                    Broadcast::Row => bd[i % c],
                };
                f(x, y)
            })
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(Op::Binary(op, a, b, bc), value, false))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), value, false)
    }

    /// Rectified linear unit; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), value, false)
    }

    /// Softmax over the last axis, with max subtraction. The normalizer is a
    /// correctly rounded sum, so permuting a row permutes the output exactly.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(LabError::NonFinite { op: "softmax" });
        }
        let k = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - m).exp()));
            let z = exact_sum(data[start..].iter().copied());
            for e in &mut data[start..start + k] {
                *e /= z;
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(Op::Softmax(x), value, false))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(LabError::NonFinite { op: "log_softmax" });
        }
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.rows() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + exact_sum(row.iter().map(|&v| (v - m).exp())).ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(Op::LogSoftmax(x), value, false))
    }

    /// Per-row standardization over the last axis using the population
    /// variance: `(x - mean) / sqrt(var + eps)`. No affine part.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut data = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.numel() / c);
        for row in xv.rows() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            data.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(Op::Normalize { x, inv_std }, value, false)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims2("transpose", xv)?;
        let value = Tensor::from_parts(vec![c, r], transpose_raw(xv.data(), r, c));
        Ok(self.push(Op::Transpose(x), value, false))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims2("slice_rows", xv)?;
        if start >= end || end > r {
            return Err(LabError::dim("slice_rows", xv.shape(), &[start, end]));
        }
        let data = xv.data()[start * c..end * c].to_vec();
        let value = Tensor::from_parts(vec![end - start, c], data);
        Ok(self.push(Op::SliceRows { x, start }, value, false))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (_, c) = dims2("slice_cols", xv)?;
        if start >= end || end > c {
            return Err(LabError::dim("slice_cols", xv.shape(), &[start, end]));
        }
        let data = xv
            .rows()
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        let value = Tensor::from_parts(vec![xv.dims2()?.0, end - start], data);
        Ok(self.push(Op::SliceCols { x, start }, value, false))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| LabError::contract("concat_rows of nothing"))?;
        let (_, c) = dims2("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let xv = self.value(x);
            let (r, c2) = dims2("concat_rows", xv)?;
            if c2 != c {
                return Err(LabError::dim("concat_rows", self.shape(*first), xv.shape()));
            }
            rows += r;
            data.extend_from_slice(xv.data());
        }
        let value = Tensor::from_parts(vec![rows, c], data);
        Ok(self.push(Op::ConcatRows(xs.to_vec()), value, false))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| LabError::contract("concat_cols of nothing"))?;
        let (r, _) = dims2("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let xv = self.value(x);
            let (r2, c) = dims2("concat_cols", xv)?;
            if r2 != r {
                return Err(LabError::dim("concat_cols", self.shape(*first), xv.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let value = Tensor::from_parts(vec![r, total], data);
        Ok(self.push(Op::ConcatCols(xs.to_vec()), value, false))
    }

    /// Picks `x[i, idx[i]]` from every row of a matrix, giving a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = dims2("gather", xv)?;
        if idx.len() != r {
            return Err(LabError::dim("gather", xv.shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(LabError::contract(format!(
                "gather index {bad} out of range for {c} columns"
            )));
        }
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| xv.get2(i, j))
            .collect();
        let value = Tensor::from_parts(vec![r], data);
        Ok(self.push(
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            value,
            false,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), false)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s), false)
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a one-element node. Gradients of nodes used more
    /// than once accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(LabError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for k in (0..=loss.0).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &self.nodes[k];
            self.propagate(node, &g, &mut grads);
            grads[k] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, _) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(bv.data(), k, n);
                    let da = matmul_raw(gd, &bt, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(av.data(), m, k);
                    let db = matmul_raw(&at, gd, k, m, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Binary(op, a, b, bc) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bd = bv.data();
                let c = bd.len();
                let bat = |i: usize| match bc {
                    Broadcast::Same => bd[i],
                    Broadcast::Scalar => bd[0],
                    Broadcast::Row => bd[i % c],
                };
                if self.requires_grad(*a) {
                    let ga = match op {
                        BinaryOp::Add | BinaryOp::Sub => gd.to_vec(),
                        BinaryOp::Mul => gd.iter().enumerate().map(|(i, g)| g * bat(i)).collect(),
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let local: Vec<f64> = match op {
                        BinaryOp::Add => gd.to_vec(),
                        BinaryOp::Sub => gd.iter().map(|g| -g).collect(),
                        BinaryOp::Mul => gd.iter().zip(av.data()).map(|(g, x)| g * x).collect(),
                    };
                    let gb = match bc {
                        Broadcast::Same => local,
                        Broadcast::Scalar => vec![local.iter().sum()],
                        Broadcast::Row => {
                            let mut acc = vec![0.0; c];
                            for row in local.chunks(c) {
                                for (s, v) in acc.iter_mut().zip(row) {
                                    *s += v;
                                }
                            }
                            acc
                        }
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, f) => {
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, gd.iter().map(|g| g * f).collect());
                }
            }
            Op::Relu(x) => {
                if self.requires_grad(*x) {
                    let gx = gd
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Softmax(x) => {
                if self.requires_grad(*x) {
                    let k = node.value.last_dim();
                    let mut gx = Vec::with_capacity(gd.len());
                    for (y, gy) in node.value.data().chunks(k).zip(gd.chunks(k)) {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        gx.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::LogSoftmax(x) => {
                if self.requires_grad(*x) {
                    let k = node.value.last_dim();
                    let mut gx = Vec::with_capacity(gd.len());
                    for (y, gy) in node.value.data().chunks(k).zip(gd.chunks(k)) {
                        let total: f64 = gy.iter().sum();
                        gx.extend(y.iter().zip(gy).map(|(yi, gi)| gi - yi.exp() * total));
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Normalize { x, inv_std } => {
                if self.requires_grad(*x) {
                    let c = node.value.last_dim();
                    let n = c as f64;
                    let mut gx = Vec::with_capacity(gd.len());
                    for ((xhat, gy), inv) in
                        node.value.data().chunks(c).zip(gd.chunks(c)).zip(inv_std)
                    {
                        let mean_g = gy.iter().sum::<f64>() / n;
                        let mean_gx = gy.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        gx.extend(
                            gy.iter()
                                .zip(xhat)
                                .map(|(gi, xi)| inv * (gi - mean_g - xi * mean_gx)),
                        );
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Transpose(x) => {
                if self.requires_grad(*x) {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    self.accumulate(grads, *x, transpose_raw(gd, r, c));
                }
            }
            Op::SliceRows { x, start } => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    let c = xv.last_dim();
                    let mut gx = vec![0.0; xv.numel()];
                    gx[start * c..start * c + gd.len()].copy_from_slice(gd);
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    let c = xv.last_dim();
                    let w = node.value.last_dim();
                    let mut gx = vec![0.0; xv.numel()];
                    for (i, gr) in gd.chunks(w).enumerate() {
                        gx[i * c + start..i * c + start + w].copy_from_slice(gr);
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).numel();
                    if self.requires_grad(x) {
                        self.accumulate(grads, x, gd[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for &x in xs {
                    let w = self.value(x).last_dim();
                    if self.requires_grad(x) {
                        let gx = gd
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        self.accumulate(grads, x, gx);
                    }
                    offset += w;
                }
            }
            Op::Gather { x, idx } => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x);
                    let c = xv.last_dim();
                    let mut gx = vec![0.0; xv.numel()];
                    for (i, (&j, g)) in idx.iter().zip(gd).enumerate() {
                        gx[i * c + j] += g;
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Sum(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).numel();
                    self.accumulate(grads, *x, vec![gd[0]; n]);
                }
            }
            Op::Mean(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).numel();
                    self.accumulate(grads, *x, vec![gd[0] / n as f64; n]);
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, delta: Vec<f64>) {
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[var.0].value.shape().to_vec();
                *slot = Some(Tensor::from_parts(shape, delta));
            }
        }
    }
}

fn op_label(op: BinaryOp) -> &'static str {
    match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().map_err(|_| LabError::dim(op, t.shape(), &[]))
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Broadcast::Scalar);
    }
    let row_shaped = matches!(b.shape(), [_] | [1, _]);
    if row_shaped && a.rank() >= 2 && b.numel() == a.last_dim() {
        return Ok(Broadcast::Row);
    }
    Err(LabError::dim(op, a.shape(), b.shape()))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = g.constant(Tensor::eye(2));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(m(&[&[1.0, 2.0]]));
        let col = g.constant(m(&[&[3.0], &[4.0]]));
        let p = g.matmul(r, col).unwrap();
        assert_eq!(g.value(p).shape(), &[1, 1]);
        assert_eq!(g.value(p).data(), &[11.0]);
    }

    #[test]
    fn matmul_annihilator() {
        let mut g = Graph::new();
        let a = g.constant(m(&[&[0.3, -1.7, 2.2], &[5.0, 0.1, -0.4]]));
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let c = g.matmul(a, z).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(LabError::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.5, -2.0]));
        let zero = g.constant(Tensor::scalar(0.0));
        let y = g.add(x, zero).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let r = g.constant(Tensor::vector(vec![-1.0, 2.0]));
        let r = g.relu(r);
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);

        let a = g.constant(Tensor::vector(vec![2.0, 3.0]));
        let b = g.constant(Tensor::vector(vec![4.0, 5.0]));
        let p = g.mul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[8.0, 15.0]);

        let bad = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(g.add(a, bad), Err(LabError::Dimension { .. })));
    }

    #[test]
    fn row_broadcast_reduces_grad_over_rows() {
        let mut g = Graph::new();
        let x = g.param(m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let b = g.param(Tensor::vector(vec![10.0, 20.0]));
        let y = g.mul(x, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[9.0, 12.0]);
        assert_eq!(
            grads.get(x).unwrap().data(),
            &[10.0, 20.0, 10.0, 20.0, 10.0, 20.0]
        );
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
        let s = g.softmax(x).unwrap();
        let d = g.value(s).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);

        let bad = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(g.softmax(bad), Err(LabError::NonFinite { .. })));
        let inf = g.constant(Tensor::vector(vec![f64::INFINITY, 0.0]));
        assert!(matches!(g.softmax(inf), Err(LabError::NonFinite { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.2, -3.0, 7.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(LabError::Contract(_))));
    }

    #[test]
    fn reuse_accumulates_exactly() {
        // f(x) = sum(x*w) used twice equals twice the single-use gradient.
        let w = Tensor::vector(vec![0.5, -1.25, 3.0]);
        let x0 = Tensor::vector(vec![1.0, 2.0, -0.5]);

        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let wv = g.constant(w.clone());
        let p = g.mul(x, wv).unwrap();
        let once = g.sum(p);
        let single = g.backward(once).unwrap().get(x).unwrap().clone();

        let mut g = Graph::new();
        let x = g.param(x0);
        let wv = g.constant(w);
        let p1 = g.mul(x, wv).unwrap();
        let p2 = g.mul(x, wv).unwrap();
        let both = g.add(p1, p2).unwrap();
        let s = g.sum(both);
        let twice = g.backward(s).unwrap().get(x).unwrap().clone();
        for (a, b) in twice.data().iter().zip(single.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn inputs_precede_node() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(&[2, 2]));
        let b = g.matmul(a, a).unwrap();
        let c = g.softmax(b).unwrap();
        let d = g.concat_rows(&[a, c]).unwrap();
        let s = g.mean(d);
        for id in 0..g.len() {
            let v = Var(id);
            assert!(g.inputs(v).iter().all(|i| i.id() < id));
        }
        assert_eq!(s.id(), g.len() - 1);
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = g.param(Tensor::vector(vec![3.0, 4.0]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_grad_zero_at_kink() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 1.0, -1.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
