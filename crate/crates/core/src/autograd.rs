//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are appended to a [`Tape`] in execution order, so the node
//! list is already a topological order. [`Tape::backward`] walks it once in
//! reverse, pushing vector-Jacobian products to inputs. Leaves that require
//! gradients accumulate into their own buffer across calls until
//! [`Tape::zero_grad`]; a leaf referenced by several operations (a shared
//! weight) receives the sum of all contributions.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MaxAcross {
        inputs: Vec<Var>,
        argmax: Vec<u32>,
    },
    MeanAcross(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        ignore: u8,
        probs: Vec<T>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// The computation tape: an ordered record of executed operations with the
/// values each backward rule needs.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t` as a leaf. It receives gradients iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let needs = t.requires_grad();
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(value, Op::Leaf, needs)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let value = t.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    fn any_needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.needs_grad(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a, "matmul")?;
        let (q2, s) = self.dims2(b, "matmul")?;
        if q != q2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), p, q, s);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Tensor::new([p, s], data)?, Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), needs))
    }

    /// `x[p×q] + bias[q]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (p, q) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [q] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let xs = self.value(x).data();
        let bs = self.value(bias).data();
        let mut data = Vec::with_capacity(p * q);
        for r in 0..p {
            data.extend(xs[r * q..(r + 1) * q].iter().zip(bs).map(|(&a, &b)| a + b));
        }
        let needs = self.any_needs(&[x, bias]);
        Ok(self.push(Tensor::new([p, q], data)?, Op::AddBias(x, bias), needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Scale(x, s), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Sigmoid(x), needs))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gelu(x), needs))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.dims2(x, "softmax_rows")?;
        let xs = self.value(x).data();
        if xs.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax_rows".into()));
        }
        let data = kernels::softmax_rows(xs, p, q);
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new([p, q], data)?, Op::Softmax(x), needs))
    }

    /// Normalizes each row of `x[p×q]`, then applies `gamma[q]`, `beta[q]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (p, q) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [q] || self.shape(beta) != [q] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let n = T::of(q as f64);
        let mut xhat = Vec::with_capacity(p * q);
        let mut rstd = Vec::with_capacity(p);
        let mut data = Vec::with_capacity(p * q);
        for r in 0..p {
            let row = &xs[r * q..(r + 1) * q];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + T::of(eps)).sqrt();
            rstd.push(rs);
            for c in 0..q {
                let h = (row[c] - mean) * rs;
                xhat.push(h);
                data.push(h * gs[c] + bs[c]);
            }
        }
        let needs = self.any_needs(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new([p, q], data)?, op, needs))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (p, q) = self.dims2(x, "slice_rows")?;
        if start >= end || end > p {
            return Err(Error::Contract(format!(
                "row slice {start}..{end} out of range for {p} rows"
            )));
        }
        let data = self.value(x).data()[start * q..end * q].to_vec();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new([end - start, q], data)?, Op::SliceRows { x, start }, needs))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (p, q) = self.dims2(x, "slice_cols")?;
        if start >= end || end > q {
            return Err(Error::Contract(format!(
                "column slice {start}..{end} out of range for {q} columns"
            )));
        }
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(p * (end - start));
        for r in 0..p {
            data.extend_from_slice(&xs[r * q + start..r * q + end]);
        }
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new([p, end - start], data)?, Op::SliceCols { x, start }, needs))
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of an empty list".into()))?;
        let (p, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &v in parts {
            let (r, c) = self.dims2(v, "concat_cols")?;
            if r != p {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(v)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(p * total);
        for r in 0..p {
            for (&v, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let needs = self.any_needs(parts);
        Ok(self.push(Tensor::new([p, total], data)?, Op::ConcatCols(parts.to_vec()), needs))
    }

    fn check_same_shapes(&self, inputs: &[Var], op: &'static str) -> Result<Vec<usize>> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract(format!("{op} over an empty list")))?;
        let shape = self.shape(first).to_vec();
        for &v in inputs {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape(op, &shape, self.shape(v)));
            }
        }
        Ok(shape)
    }

    /// Per-position maximum over same-shaped tensors. Ties go to the
    /// earliest input.
    pub fn max_across(&mut self, inputs: &[Var]) -> Result<Var> {
        let shape = self.check_same_shapes(inputs, "max_across")?;
        let numel = self.value(inputs[0]).numel();
        let mut data = self.value(inputs[0]).data().to_vec();
        let mut argmax = vec![0u32; numel];
        for (k, &v) in inputs.iter().enumerate().skip(1) {
            for (j, &x) in self.value(v).data().iter().enumerate() {
                if x > data[j] {
                    data[j] = x;
                    argmax[j] = k as u32;
                }
            }
        }
        let needs = self.any_needs(inputs);
        let op = Op::MaxAcross {
            inputs: inputs.to_vec(),
            argmax,
        };
        Ok(self.push(Tensor::new(shape, data)?, op, needs))
    }

    /// Per-position mean over same-shaped tensors.
    pub fn mean_across(&mut self, inputs: &[Var]) -> Result<Var> {
        let shape = self.check_same_shapes(inputs, "mean_across")?;
        let numel = self.value(inputs[0]).numel();
        let mut data = vec![T::zero(); numel];
        for &v in inputs {
            for (d, &x) in data.iter_mut().zip(self.value(v).data()) {
                *d = *d + x;
            }
        }
        let inv = T::one() / T::of(inputs.len() as f64);
        data.iter_mut().for_each(|d| *d = *d * inv);
        let needs = self.any_needs(inputs);
        Ok(self.push(Tensor::new(shape, data)?, Op::MeanAcross(inputs.to_vec()), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Reshape(x), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (p, q) = self.dims2(x, "transpose")?;
        let data = kernels::transpose(self.value(x).data(), p, q);
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::new([q, p], data)?, Op::Transpose(x), needs))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), needs))
    }

    /// Mean cross-entropy of `logits[P×K]` rows against `labels`, skipping
    /// rows labelled `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let (p, k) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != p {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let count = labels.iter().filter(|&&l| l != ignore).count();
        if count == 0 {
            return Err(Error::Contract("every pixel is ignored".into()));
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), p, k);
        let xs = self.value(logits).data();
        let mut total = T::zero();
        for (r, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            let row = &xs[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[l as usize]);
        }
        let loss = total / T::of(count as f64);
        let needs = self.needs_grad(logits);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            ignore,
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Propagates from a scalar `root`, accumulating into every leaf that
    /// requires gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("root is not on this tape".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = self.value(*a).dims2()?;
                let s = self.value(*b).shape()[1];
                if self.needs_grad(*a) {
                    send(*a, kernels::matmul_nt(g, self.value(*b).data(), p, s, q));
                }
                if self.needs_grad(*b) {
                    send(*b, kernels::matmul_tn(self.value(*a).data(), g, p, q, s));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddBias(x, bias) => {
                let q = self.value(*bias).numel();
                if self.needs_grad(*bias) {
                    let mut gb = vec![T::zero(); q];
                    for row in g.chunks(q) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    send(*bias, gb);
                }
                send(*x, g.to_vec());
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|&v| v * *s).collect()),
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs_grad(*a) {
                    send(*a, zip_map(g, bv, |x, y| x * y));
                }
                if self.needs_grad(*b) {
                    send(*b, zip_map(g, av, |x, y| x * y));
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, zip_map(g, y, |gv, yv| gv * yv * (T::one() - yv)));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                send(*x, zip_map(g, xv, |gv, v| gv * kernels::gelu_grad(v)));
            }
            Op::Softmax(x) => {
                let (p, q) = node.value.dims2()?;
                let y = node.value.data();
                let mut dx = vec![T::zero(); p * q];
                for r in 0..p {
                    let yr = &y[r * q..(r + 1) * q];
                    let gr = &g[r * q..(r + 1) * q];
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for c in 0..q {
                        dx[r * q + c] = yr[c] * (gr[c] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (p, q) = node.value.dims2()?;
                let gs = self.value(*gamma).data();
                if self.needs_grad(*gamma) || self.needs_grad(*beta) {
                    let mut dg = vec![T::zero(); q];
                    let mut db = vec![T::zero(); q];
                    for r in 0..p {
                        for c in 0..q {
                            let gv = g[r * q + c];
                            dg[c] = dg[c] + gv * xhat[r * q + c];
                            db[c] = db[c] + gv;
                        }
                    }
                    send(*gamma, dg);
                    send(*beta, db);
                }
                if self.needs_grad(*x) {
                    let n = T::of(q as f64);
                    let mut dx = vec![T::zero(); p * q];
                    for r in 0..p {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..q {
                            let d = g[r * q + c] * gs[c];
                            sum_d = sum_d + d;
                            sum_dx = sum_dx + d * xhat[r * q + c];
                        }
                        let mean_d = sum_d / n;
                        let mean_dx = sum_dx / n;
                        for c in 0..q {
                            let d = g[r * q + c] * gs[c];
                            dx[r * q + c] = rstd[r] * (d - mean_d - xhat[r * q + c] * mean_dx);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::SliceRows { x, start } => {
                let (p, q) = self.value(*x).dims2()?;
                let mut dx = vec![T::zero(); p * q];
                dx[start * q..start * q + g.len()].copy_from_slice(g);
                send(*x, dx);
            }
            Op::SliceCols { x, start } => {
                let (p, q) = self.value(*x).dims2()?;
                let w = node.value.shape()[1];
                let mut dx = vec![T::zero(); p * q];
                for r in 0..p {
                    dx[r * q + start..r * q + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let (p, total) = node.value.dims2()?;
                let mut offset = 0;
                for &v in parts {
                    let w = self.value(v).shape()[1];
                    if self.needs_grad(v) {
                        let mut dv = Vec::with_capacity(p * w);
                        for r in 0..p {
                            dv.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(v, dv);
                    }
                    offset += w;
                }
            }
            Op::MaxAcross { inputs, argmax } => {
                for (k, &v) in inputs.iter().enumerate() {
                    if self.needs_grad(v) {
                        let dv = g
                            .iter()
                            .zip(argmax)
                            .map(|(&gv, &a)| if a as usize == k { gv } else { T::zero() })
                            .collect();
                        send(v, dv);
                    }
                }
            }
            Op::MeanAcross(inputs) => {
                let inv = T::one() / T::of(inputs.len() as f64);
                for &v in inputs {
                    send(v, g.iter().map(|&gv| gv * inv).collect());
                }
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Transpose(x) => {
                let (p, q) = node.value.dims2()?;
                send(*x, kernels::transpose(g, p, q));
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / T::of(*count as f64);
                let mut dx = vec![T::zero(); probs.len()];
                for (r, &l) in labels.iter().enumerate() {
                    if l == *ignore {
                        continue;
                    }
                    for c in 0..k {
                        let onehot = if c == l as usize { T::one() } else { T::zero() };
                        dx[r * k + c] = (probs[r * k + c] - onehot) * scale;
                    }
                }
                send(*logits, dx);
            }
        }
        Ok(())
    }
}

fn zip_map<T: Copy>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 1], &[2.0]));
        let b = tape.constant(t(&[1, 1], &[3.0]));
        let ab = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(ab).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn matmul_gradient_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]).with_requires_grad(true));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let ab = tape.matmul(a, b).unwrap();
        let s = tape.sum(ab).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 3], &[0.0, 0.0, 0.0, 1.0, -1.0, 0.0, 1000.0, 0.0, 0.0]));
        let x2 = tape.slice_cols(x, 0, 2).unwrap();
        let y = tape.softmax_rows(x2).unwrap();
        let v = tape.value(y).data().to_vec();
        assert!((v[2] - 0.8808).abs() < 1e-3 && (v[3] - 0.1192).abs() < 1e-3);
        assert_eq!(&v[4..6], &[1.0, 0.0]);
        let y3 = tape.softmax_rows(x).unwrap();
        for &p in &tape.value(y3).data()[0..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new([1, 2], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::<f64>::zeros([2, 3]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[1], &[3.0]).with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        // a second call accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::<f32>::zeros([2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_grad_leaf_never_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let w = tape.leaf(&t(&[2], &[1.0, 1.0]).with_requires_grad(true));
        let y = tape.mul(x, w).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_ignore() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros([3, 4]));
        let loss = tape.cross_entropy(logits, &[0, 255, 3], 255).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        assert!(tape.cross_entropy(logits, &[255, 255, 255], 255).is_err());
        assert!(tape.cross_entropy(logits, &[0, 4, 1], 255).is_err());
    }

    #[test]
    fn max_across_routes_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 5.0]).with_requires_grad(true));
        let b = tape.leaf(&t(&[1, 2], &[3.0, 2.0]).with_requires_grad(true));
        let m = tape.max_across(&[a, b]).unwrap();
        let avg = tape.mean_across(&[a, b]).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        assert_eq!(tape.value(avg).data(), &[2.0, 3.5]);
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 0.0]);
        assert!(tape.max_across(&[]).is_err());
    }
}
