//! Operation tape with reverse-mode gradient accumulation.
//!
//! Every operation appends a node holding its value. [`Graph::backward`] walks
//! the tape in reverse, so the tape order is already a topological order and
//! no explicit sort is needed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::gemm;
use crate::numerics::{Gradients, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient buffer per input (same length as that input), or
    /// `None` for inputs that receive no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogSumExpRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    MeanRows(Var),
    Sum(Var),
    Transpose(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter on the tape (once per graph). Non-trainable
    /// parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = as_matrix(self.value(a));
        let (br, bc) = as_matrix(self.value(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            self.value(a).data(),
            ar,
            ac,
            ta,
            self.value(b).data(),
            br,
            bc,
            tb,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let c = va.cols();
        if vr.len() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", va.shape(), vr.shape()),
            ));
        }
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = Vec::with_capacity(va.len());
        for row in va.data().chunks(c) {
            data.extend(crate::numerics::softmax(row));
        }
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("width {c} vs affine params"),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(vx.len());
        let mut xhat = Vec::with_capacity(vx.len());
        let mut inv_std = Vec::with_capacity(vx.rows());
        for row in vx.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Max-shifted log-sum-exp over the last axis; result is `rows × 1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let data: Vec<f64> = va
            .data()
            .chunks(c)
            .map(crate::numerics::logsumexp)
            .collect();
        let t = Tensor::matrix(data.len(), 1, data).expect("column");
        let rg = self.rg(a);
        self.push(t, Op::LogSumExpRows(a), rg)
    }

    /// Log-sum-exp over `axis` of a matrix (0 = down columns, 1 = along rows).
    pub fn logsumexp_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => Ok(self.logsumexp_rows(a)),
            0 => {
                let t = self.transpose(a);
                let l = self.logsumexp_rows(t);
                Ok(self.transpose(l))
            }
            _ => Err(Error::shape(
                "logsumexp",
                format!("axis {axis} out of range"),
            )),
        }
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(p) => self.value(*p).rows(),
            None => return Err(Error::shape("concat", "no inputs")),
        };
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::shape("concat", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {:?}", va.shape()),
            ));
        }
        let mut data = Vec::with_capacity(va.rows() * (end - start));
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row(r)[start..end]);
        }
        let t = Tensor::matrix(va.rows(), end - start, data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceCols { a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {:?}", va.shape()),
            ));
        }
        let c = va.cols();
        let t = Tensor::matrix(end - start, c, va.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SliceRows { a, start }, rg))
    }

    /// Mean over axis 0; result is `1 × cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = as_matrix(va);
        let mut data = vec![0.0; c];
        for row in va.data().chunks(c) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= r as f64);
        let t = Tensor::matrix(1, c, data).expect("row");
        let rg = self.rg(a);
        self.push(t, Op::MeanRows(a), rg)
    }

    /// Mean over `axis` of a matrix (0 = down columns, 1 = along rows).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            0 => Ok(self.mean_rows(a)),
            1 => {
                let t = self.transpose(a);
                let m = self.mean_rows(t);
                Ok(self.transpose(m))
            }
            _ => Err(Error::shape("mean", format!("axis {axis} out of range"))),
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = as_matrix(va);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, data).expect("transpose");
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Appends an externally computed node with a custom backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// parameter placed on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let grads = self.backward_all(loss)?;
        let mut out = Gradients::empty(self.params.keys().map(|p| p.0 + 1).max().unwrap_or(0));
        for (id, var) in &self.params {
            if let Some(g) = &grads[var.0] {
                out.set(*id, g.clone());
            } else if self.nodes[var.0].requires_grad {
                out.set(*id, vec![0.0; self.nodes[var.0].value.len()]);
            }
        }
        Ok(out)
    }

    /// Gradient with respect to an arbitrary leaf created by [`Graph::input`].
    pub fn gradient_of(&self, loss: Var, leaf: Var) -> Result<Tensor> {
        let grads = self.backward_all(loss)?;
        let v = &self.nodes[leaf.0].value;
        let g = grads[leaf.0].clone().unwrap_or_else(|| vec![0.0; v.len()]);
        Tensor::new(v.shape().to_vec(), g)
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (ar, ac) = as_matrix(va);
                let (br, bc) = as_matrix(vb);
                let (m, n) = as_matrix(&node.value);
                // out = op(a) op(b); d op(a) = g op(b)^T, d op(b) = op(a)^T g
                acc(*a, &mut |buf| {
                    if *ta {
                        // a^T = g op(b)^T  =>  a = op(b) g^T
                        gemm(vb.data(), br, bc, *tb, g, m, n, true, buf, true);
                    } else {
                        gemm(g, m, n, false, vb.data(), br, bc, !*tb, buf, true);
                    }
                });
                acc(*b, &mut |buf| {
                    if *tb {
                        // b^T = op(a)^T g  =>  b = g^T op(a)
                        gemm(g, m, n, true, va.data(), ar, ac, *ta, buf, true);
                    } else {
                        gemm(va.data(), ar, ac, !*ta, g, m, n, false, buf, true);
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    acc(*v, &mut |buf| {
                        buf.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                    });
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, x)| *d += x)
                });
                acc(*row, &mut |buf| {
                    let c = buf.len();
                    for chunk in g.chunks(c) {
                        buf.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |buf| {
                    for ((d, x), y) in buf.iter_mut().zip(g).zip(vb.data()) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((d, x), y) in buf.iter_mut().zip(g).zip(va.data()) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, f) => {
                acc(*a, &mut |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, x)| *d += x * f)
                });
            }
            Op::Relu(a) => {
                let va = &nodes[a.0].value;
                acc(*a, &mut |buf| {
                    for ((d, x), v) in buf.iter_mut().zip(g).zip(va.data()) {
                        if *v > 0.0 {
                            *d += x;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |buf| {
                    for ((d, x), t) in buf.iter_mut().zip(g).zip(y.data()) {
                        *d += x * (1.0 - t * t);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                acc(*a, &mut |buf| {
                    for ((drow, grow), yrow) in
                        buf.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, p)| x * p).sum();
                        for ((d, x), p) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += p * (x - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gv = nodes[gain.0].value.data();
                acc(*x, &mut |buf| {
                    for (r, (drow, grow)) in buf.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(x, w)| x * w).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / c as f64;
                        for ((d, dhj), hj) in drow.iter_mut().zip(&dh).zip(hrow) {
                            *d += k * (c as f64 * dhj - sum_dh - hj * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, x), h) in buf.iter_mut().zip(grow).zip(hrow) {
                            *d += x * h;
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for grow in g.chunks(c) {
                        buf.iter_mut().zip(grow).for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let va = &nodes[a.0].value;
                let c = va.cols();
                let lse = node.value.data();
                acc(*a, &mut |buf| {
                    for (r, (drow, xrow)) in buf.chunks_mut(c).zip(va.data().chunks(c)).enumerate()
                    {
                        for (d, x) in drow.iter_mut().zip(xrow) {
                            *d += g[r] * (x - lse[r]).exp();
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    acc(*p, &mut |buf| {
                        for (drow, grow) in buf.chunks_mut(w).zip(g.chunks(total)) {
                            drow.iter_mut()
                                .zip(&grow[offset..offset + w])
                                .for_each(|(d, x)| *d += x);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { a, start } => {
                let w = node.value.cols();
                let c = nodes[a.0].value.cols();
                acc(*a, &mut |buf| {
                    for (drow, grow) in buf.chunks_mut(c).zip(g.chunks(w)) {
                        drow[*start..*start + w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, x)| *d += x);
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let c = node.value.cols();
                acc(*a, &mut |buf| {
                    buf[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                });
            }
            Op::MeanRows(a) => {
                let (r, c) = as_matrix(&nodes[a.0].value);
                acc(*a, &mut |buf| {
                    for drow in buf.chunks_mut(c) {
                        drow.iter_mut().zip(g).for_each(|(d, x)| *d += x / r as f64);
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |buf| buf.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Transpose(a) => {
                let (r, c) = as_matrix(&nodes[a.0].value);
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let input_grads = op.backward(&values, &node.value, g);
                for (v, ig) in inputs.iter().zip(input_grads) {
                    if let Some(ig) = ig {
                        acc(*v, &mut |buf| {
                            buf.iter_mut().zip(&ig).for_each(|(d, x)| *d += x)
                        });
                    }
                }
            }
        }
    }
}
