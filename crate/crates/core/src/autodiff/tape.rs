//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. Nodes are only ever appended after their inputs, so the tape
//! index order is a topological order and [`Tape::backward`] can sweep it in
//! reverse, visiting each node exactly once.
//!
//! Tie conventions: `relu` passes gradient only for strictly positive inputs,
//! and max-style reductions route the gradient to the first maximal element
//! in scan order.

use std::cell::{Ref, RefCell};

use super::linalg::{gemm, Layout};
use crate::error::TensorError;
use crate::tensor::{numel, Tensor};

/// Norms below this are treated as zero by `normalize`, `cosine` and `l2_norm`.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddBias(usize, usize),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Concat(Vec<usize>, usize),
    Slice { src: usize, axis: usize, start: usize },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Broadcast(usize, usize),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax { src: usize, axis: usize },
    LogSoftmax(usize),
    L2Norm(usize, usize),
    Normalize(usize),
    Cosine(usize, usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, spec: Conv2dSpec },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    AvgPool2d { x: usize, size: usize, stride: usize },
    Gather { table: usize, ids: Vec<usize> },
    Pick { src: usize, idx: Vec<usize> },
    MaskedMax { src: usize, argmax: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Broadcast(..) => "broadcast",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAll(..) => "sum_all",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::L2Norm(..) => "l2_norm",
            Op::Normalize(..) => "normalize",
            Op::Cosine(..) => "cosine",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Gather { .. } => "gather",
            Op::Pick { .. } => "pick",
            Op::MaskedMax { .. } => "masked_max",
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A differentiation graph. Single-owner: a tape may move between threads
/// but is never shared mutably.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Vec<f64>>>>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op: Op::Leaf });
        self.leaf_grads.borrow_mut().push(None);
        Var(nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
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

    /// Name of the operation that produced `v`.
    pub fn provenance(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op.name()
    }

    /// Accumulated gradient of a differentiable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let shape = self.shape(v);
        self.leaf_grads.borrow()[v.0].as_ref().map(|g| Tensor::from_parts(shape, g.clone()))
    }

    pub fn zero_grad(&self) {
        for g in self.leaf_grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    fn push(&self, op: Op, parents: &[usize], value: Tensor) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node { value, requires_grad, op });
        self.leaf_grads.borrow_mut().push(None);
        Ok(Var(nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let shape = self.same_shape(op.name(), a, b)?;
        let data = {
            let nodes = self.nodes.borrow();
            let (x, y) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
        };
        self.push(op, &[a.0, b.0], Tensor::from_parts(shape, data))
    }

    fn unary(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        self.push(op, &[a.0], value)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.unary(a, Op::Scale(a.0, factor), |x| x * factor)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(a, Op::AddScalar(a.0), |x| x + c)
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: sx, rhs: sb });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let b = nodes[bias.0].value.data();
            let mut data = nodes[x.0].value.data().to_vec();
            for row in data.chunks_exact_mut(b.len()) {
                add_into(row, b);
            }
            Tensor::from_parts(sx, data)
        };
        self.push(Op::AddBias(x.0, bias.0), &[x.0, bias.0], value)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = {
            let nodes = self.nodes.borrow();
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                nodes[a.0].value.data(),
                Layout::row_major(k),
                nodes[b.0].value.data(),
                Layout::row_major(n),
                0.0,
                &mut out,
            );
            Tensor::from_parts(vec![m, n], out)
        };
        self.push(Op::MatMul(a.0, b.0), &[a.0, b.0], value)
    }

    /// `[B, m, k] × [B, k, n] → [B, m, n]`.
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "bmm", lhs: sa, rhs: sb });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                gemm(
                    m,
                    k,
                    n,
                    &x[i * m * k..(i + 1) * m * k],
                    Layout::row_major(k),
                    &y[i * k * n..(i + 1) * k * n],
                    Layout::row_major(n),
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            Tensor::from_parts(vec![bs, m, n], out)
        };
        self.push(Op::BatchMatMul(a.0, b.0), &[a.0, b.0], value)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let s0 = self.shape(*first);
        if axis >= s0.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for rank {}", s0.len()),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != s0.len()
                || s.iter().zip(&s0).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: s0, rhs: s });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut shape = s0.clone();
        shape[axis] = total;
        let value = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let chunk = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(Op::Concat(ids.clone(), axis), &ids, value)
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let s = self.shape(a);
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{end} on axis {axis} of shape {s:?}"),
            });
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let mut shape = s.clone();
        shape[axis] = end - start;
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0].value.data();
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&x[base + start * inner..base + end * inner]);
            }
            Tensor::from_parts(shape, data)
        };
        self.push(Op::Slice { src: a.0, axis, start }, &[a.0], value)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape(a.0), &[a.0], value)
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(a);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of rank {}", s.len()),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0].value.data();
            let map = permute_map(&s, perm);
            Tensor::from_parts(out_shape, map.iter().map(|&i| x[i]).collect())
        };
        self.push(Op::Permute(a.0, perm.to_vec()), &[a.0], value)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::InvalidArgument { op: "permute", reason: "rank < 2".into() });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Repeats `a` along a new leading axis of length `count`.
    pub fn broadcast(&self, a: Var, count: usize) -> Result<Var, TensorError> {
        if count == 0 {
            return Err(TensorError::InvalidArgument { op: "broadcast", reason: "count 0".into() });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut shape = vec![count];
            shape.extend_from_slice(x.shape());
            Tensor::from_parts(shape, x.data().repeat(count))
        };
        self.push(Op::Broadcast(a.0, count), &[a.0], value)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<Vec<usize>, TensorError> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(TensorError::InvalidArgument {
                op,
                reason: format!("axis {axis} out of range for shape {s:?}"),
            });
        }
        Ok(s)
    }

    fn reduce(&self, a: Var, axis: usize, mean: bool) -> Result<Var, TensorError> {
        let op_name = if mean { "mean" } else { "sum" };
        let s = self.check_axis(op_name, a, axis)?;
        let (outer, len, inner) = axis_split(&s, axis);
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0].value.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for l in 0..len {
                    add_into(dst, &x[(o * len + l) * inner..(o * len + l + 1) * inner]);
                }
                if mean {
                    for v in dst.iter_mut() {
                        *v /= len as f64;
                    }
                }
            }
            Tensor::from_parts(without_axis(&s, axis), out)
        };
        let op = if mean { Op::Mean(a.0, axis) } else { Op::Sum(a.0, axis) };
        self.push(op, &[a.0], value)
    }

    pub fn sum(&self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(a, axis, true)
    }

    pub fn sum_all(&self, a: Var) -> Result<Var, TensorError> {
        let total = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a.0), &[a.0], Tensor::scalar(total))
    }

    pub fn exp(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    pub fn log(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Log(a.0), f64::ln)
    }

    pub fn tanh(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn relu(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.masked_softmax(a, axis, None)
    }

    /// Softmax along `axis` over entries where `mask` is true; masked entries
    /// come out as exactly zero. `mask` has the full shape of `a`.
    pub fn masked_softmax(&self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let s = self.check_axis("softmax", a, axis)?;
        if let Some(m) = mask {
            if m.len() != numel(&s) {
                return Err(TensorError::ShapeMismatch { op: "softmax", lhs: s, rhs: vec![m.len()] });
            }
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0].value.data();
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let keep = |l: usize| mask.is_none_or(|m| m[idx(l)]);
                    let max = (0..len)
                        .filter(|&l| keep(l))
                        .map(|l| x[idx(l)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        return Err(TensorError::InvalidArgument {
                            op: "softmax",
                            reason: "every entry along the axis is masked".into(),
                        });
                    }
                    let mut total = 0.0;
                    for l in 0..len {
                        if keep(l) {
                            let e = (x[idx(l)] - max).exp();
                            out[idx(l)] = e;
                            total += e;
                        }
                    }
                    for l in 0..len {
                        out[idx(l)] /= total;
                    }
                }
            }
            Tensor::from_parts(s, out)
        };
        self.push(Op::Softmax { src: a.0, axis }, &[a.0], value)
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        let n = *s.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "log_softmax",
            reason: "scalar input".into(),
        })?;
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0].value.data();
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks_exact(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::from_parts(s, out)
        };
        self.push(Op::LogSoftmax(a.0), &[a.0], value)
    }

    pub fn l2_norm(&self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let s = self.check_axis("l2_norm", a, axis)?;
        let (outer, len, inner) = axis_split(&s, axis);
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0].value.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let ss: f64 = (0..len).map(|l| x[(o * len + l) * inner + i].powi(2)).sum();
                    out[o * inner + i] = ss.sqrt();
                }
            }
            Tensor::from_parts(without_axis(&s, axis), out)
        };
        self.push(Op::L2Norm(a.0, axis), &[a.0], value)
    }

    /// Scales every row of the last axis to unit length; zero rows stay zero.
    pub fn normalize(&self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape(a);
        let n = *s.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "normalize",
            reason: "scalar input".into(),
        })?;
        let value = {
            let nodes = self.nodes.borrow();
            let x = nodes[a.0].value.data();
            let mut out = vec![0.0; x.len()];
            for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm >= NORM_EPS {
                    for (d, v) in dst.iter_mut().zip(row) {
                        *d = v / norm;
                    }
                }
            }
            Tensor::from_parts(s, out)
        };
        self.push(Op::Normalize(a.0), &[a.0], value)
    }

    /// Cosine similarity between matching rows (last axis); the output drops
    /// that axis. A zero row gives similarity 0.
    pub fn cosine(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let s = self.same_shape("cosine", a, b)?;
        let n = *s.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "cosine",
            reason: "scalar input".into(),
        })?;
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let out = x
                .chunks_exact(n)
                .zip(y.chunks_exact(n))
                .map(|(p, q)| cosine_parts(p, q).0)
                .collect();
            Tensor::from_parts(s[..s.len() - 1].to_vec(), out)
        };
        self.push(Op::Cosine(a.0, b.0), &[a.0, b.0], value)
    }

    /// `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, optional `b: [O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var, TensorError> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if let Some(b) = b {
            let sb = self.shape(b);
            if sb != [sw[0]] {
                return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sw, rhs: sb });
            }
        }
        let geo = ConvGeometry::new(&sx, &sw, spec)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let wd = nodes[w.0].value.data();
            let bias = b.map(|b| nodes[b.0].value.data());
            let mut out = vec![0.0; geo.n * geo.out_c * geo.hw()];
            let mut col = vec![0.0; geo.ck() * geo.hw()];
            for n in 0..geo.n {
                geo.im2col(&xd[n * geo.in_len()..(n + 1) * geo.in_len()], &mut col);
                let dst = &mut out[n * geo.out_len()..(n + 1) * geo.out_len()];
                gemm(
                    geo.out_c,
                    geo.ck(),
                    geo.hw(),
                    wd,
                    Layout::row_major(geo.ck()),
                    &col,
                    Layout::row_major(geo.hw()),
                    0.0,
                    dst,
                );
                if let Some(bias) = bias {
                    for (o, row) in dst.chunks_exact_mut(geo.hw()).enumerate() {
                        for v in row {
                            *v += bias[o];
                        }
                    }
                }
            }
            Tensor::from_parts(vec![geo.n, geo.out_c, geo.out_h, geo.out_w], out)
        };
        let mut parents = vec![x.0, w.0];
        parents.extend(b.map(|b| b.0));
        self.push(Op::Conv2d { x: x.0, w: w.0, b: b.map(|b| b.0), spec }, &parents, value)
    }

    fn pool_geometry(&self, op: &'static str, x: Var, size: usize, stride: usize) -> Result<[usize; 6], TensorError> {
        let s = self.shape(x);
        if s.len() != 4 || size == 0 || stride == 0 || s[2] < size || s[3] < size {
            return Err(TensorError::InvalidArgument {
                op,
                reason: format!("window {size} stride {stride} on shape {s:?}"),
            });
        }
        Ok([s[0], s[1], s[2], s[3], (s[2] - size) / stride + 1, (s[3] - size) / stride + 1])
    }

    pub fn max_pool2d(&self, x: Var, size: usize, stride: usize) -> Result<Var, TensorError> {
        let [n, c, h, w, oh, ow] = self.pool_geometry("max_pool2d", x, size, stride)?;
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let base = plane * h * w;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = base + oi * stride * w + oj * stride;
                        for ki in 0..size {
                            for kj in 0..size {
                                let idx = base + (oi * stride + ki) * w + oj * stride + kj;
                                if xd[idx] > xd[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(xd[best]);
                        argmax.push(best);
                    }
                }
            }
            (Tensor::from_parts(vec![n, c, oh, ow], out), argmax)
        };
        self.push(Op::MaxPool2d { x: x.0, argmax }, &[x.0], value)
    }

    pub fn avg_pool2d(&self, x: Var, size: usize, stride: usize) -> Result<Var, TensorError> {
        let [n, c, h, w, oh, ow] = self.pool_geometry("avg_pool2d", x, size, stride)?;
        let value = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let area = (size * size) as f64;
            let mut out = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let base = plane * h * w;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = 0.0;
                        for ki in 0..size {
                            for kj in 0..size {
                                acc += xd[base + (oi * stride + ki) * w + oj * stride + kj];
                            }
                        }
                        out.push(acc / area);
                    }
                }
            }
            Tensor::from_parts(vec![n, c, oh, ow], out)
        };
        self.push(Op::AvgPool2d { x: x.0, size, stride }, &[x.0], value)
    }

    /// Row lookup `table[ids[i], :]` (embedding lookup).
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::InvalidArgument { op: "gather", reason: format!("table shape {s:?}") });
        }
        if ids.is_empty() {
            return Err(TensorError::InvalidArgument { op: "gather", reason: "no ids".into() });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::IndexOutOfRange { op: "gather", index: bad, bound: s[0] });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let t = nodes[table.0].value.data();
            let mut data = Vec::with_capacity(ids.len() * s[1]);
            for &i in ids {
                data.extend_from_slice(&t[i * s[1]..(i + 1) * s[1]]);
            }
            Tensor::from_parts(vec![ids.len(), s[1]], data)
        };
        self.push(Op::Gather { table: table.0, ids: ids.to_vec() }, &[table.0], value)
    }

    /// `out[r] = x[r, idx[r]]` over the last axis.
    pub fn pick(&self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let n = *s.last().unwrap_or(&0);
        let rows = if n == 0 { 0 } else { numel(&s) / n };
        if s.is_empty() || rows != idx.len() {
            return Err(TensorError::ShapeMismatch { op: "pick", lhs: s, rhs: vec![idx.len()] });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfRange { op: "pick", index: bad, bound: n });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let data = idx.iter().enumerate().map(|(r, &i)| xd[r * n + i]).collect();
            Tensor::from_parts(s[..s.len() - 1].to_vec(), data)
        };
        self.push(Op::Pick { src: x.0, idx: idx.to_vec() }, &[x.0], value)
    }

    /// Max over the last axis restricted to entries where `mask` is true.
    pub fn masked_max(&self, x: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let n = *s.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "masked_max",
            reason: "scalar input".into(),
        })?;
        if let Some(m) = mask {
            if m.len() != numel(&s) {
                return Err(TensorError::ShapeMismatch { op: "masked_max", lhs: s, rhs: vec![m.len()] });
            }
        }
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let xd = nodes[x.0].value.data();
            let mut out = Vec::with_capacity(xd.len() / n);
            let mut argmax = Vec::with_capacity(xd.len() / n);
            for r in 0..xd.len() / n {
                let mut best: Option<usize> = None;
                for j in r * n..(r + 1) * n {
                    if mask.is_some_and(|m| !m[j]) {
                        continue;
                    }
                    if best.is_none_or(|b| xd[j] > xd[b]) {
                        best = Some(j);
                    }
                }
                let b = best.ok_or_else(|| TensorError::InvalidArgument {
                    op: "masked_max",
                    reason: format!("row {r} is fully masked"),
                })?;
                out.push(xd[b]);
                argmax.push(b);
            }
            (Tensor::from_parts(s[..s.len() - 1].to_vec(), out), argmax)
        };
        self.push(Op::MaskedMax { src: x.0, argmax }, &[x.0], value)
    }

    /// Accumulates `∂loss/∂leaf` into every differentiable leaf reachable from
    /// `loss`. Repeated calls add to the stored gradients until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if numel(shape) != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        if !nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut leaf_grads[id] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            propagate(node, &g, &nodes, &mut grads);
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(cos, |p|, |q|)`, with cos = 0 when either norm is below [`NORM_EPS`].
fn cosine_parts(p: &[f64], q: &[f64]) -> (f64, f64, f64) {
    let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if np < NORM_EPS || nq < NORM_EPS {
        return (0.0, np, nq);
    }
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    (dot / (np * nq), np, nq)
}

/// Flat source index for each output element of a permutation.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

struct ConvGeometry {
    n: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], spec: Conv2dSpec) -> Result<Self, TensorError> {
        let (h, w, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        let p = spec.padding;
        if spec.stride == 0 || h + 2 * p < kh || w + 2 * p < kw {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel {kh}x{kw} stride {} padding {p} on {h}x{w}", spec.stride),
            });
        }
        Ok(Self {
            n: sx[0],
            in_c: sx[1],
            in_h: h,
            in_w: w,
            out_c: sw[0],
            kh,
            kw,
            out_h: (h + 2 * p - kh) / spec.stride + 1,
            out_w: (w + 2 * p - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: p,
        })
    }

    fn hw(&self) -> usize {
        self.out_h * self.out_w
    }

    fn ck(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.hw()
    }

    /// Calls `f(col_index, src_index)` for every in-bounds column entry.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let hw = self.hw();
        for c in 0..self.in_c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oi in 0..self.out_h {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.in_h as isize {
                            continue;
                        }
                        let src_row = (c * self.in_h + ii as usize) * self.in_w;
                        for oj in 0..self.out_w {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= self.in_w as isize {
                                continue;
                            }
                            f(row * hw + oi * self.out_w + oj, src_row + jj as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        col.fill(0.0);
        self.for_each_tap(|ci, si| col[ci] = x[si]);
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        self.for_each_tap(|ci, si| dx[si] += col[ci]);
    }
}

/// Grad buffer for `id`, allocated on first use; `None` when `id` is not differentiable.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]))
}

fn propagate(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| nodes[id].value.data();
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(d) = slot(grads, nodes, *a) {
                add_into(d, g);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                add_into(d, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(grads, nodes, *a) {
                add_into(d, g);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                for (d, g) in d.iter_mut().zip(g) {
                    *d -= g;
                }
            }
        }
        Op::Mul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            if let Some(d) = slot(grads, nodes, *a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                    *d += g * y;
                }
            }
            if let Some(d) = slot(grads, nodes, *b) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                    *d += g * x;
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(d) = slot(grads, nodes, *a) {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += g * f;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(d) = slot(grads, nodes, *a) {
                add_into(d, g);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(d) = slot(grads, nodes, *x) {
                add_into(d, g);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                let n = d.len();
                for row in g.chunks_exact(n) {
                    add_into(d, row);
                }
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(d) = slot(grads, nodes, *a) {
                gemm(m, n, k, g, Layout::row_major(n), val(*b), Layout::transposed(n), 1.0, d);
            }
            if let Some(d) = slot(grads, nodes, *b) {
                gemm(k, m, n, val(*a), Layout::transposed(k), g, Layout::row_major(n), 1.0, d);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            if let Some(d) = slot(grads, nodes, *a) {
                let y = val(*b);
                for i in 0..bs {
                    gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        Layout::row_major(n),
                        &y[i * k * n..(i + 1) * k * n],
                        Layout::transposed(n),
                        1.0,
                        &mut d[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            if let Some(d) = slot(grads, nodes, *b) {
                let x = val(*a);
                for i in 0..bs {
                    gemm(
                        k,
                        m,
                        n,
                        &x[i * m * k..(i + 1) * m * k],
                        Layout::transposed(k),
                        &g[i * m * n..(i + 1) * m * n],
                        Layout::row_major(n),
                        1.0,
                        &mut d[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        }
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = axis_split(node.value.shape(), *axis);
            let mut offset = 0;
            let total = node.value.shape()[*axis] * inner;
            for &p in parts {
                let chunk = nodes[p].value.shape()[*axis] * inner;
                if let Some(d) = slot(grads, nodes, p) {
                    for o in 0..outer {
                        add_into(&mut d[o * chunk..(o + 1) * chunk], &g[o * total + offset..o * total + offset + chunk]);
                    }
                }
                offset += chunk;
            }
        }
        Op::Slice { src, axis, start } => {
            let (outer, len, inner) = axis_split(nodes[*src].value.shape(), *axis);
            let chunk = node.value.shape()[*axis] * inner;
            if let Some(d) = slot(grads, nodes, *src) {
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    add_into(&mut d[base..base + chunk], &g[o * chunk..(o + 1) * chunk]);
                }
            }
        }
        Op::Permute(src, perm) => {
            if let Some(d) = slot(grads, nodes, *src) {
                let map = permute_map(nodes[*src].value.shape(), perm);
                for (gi, &si) in g.iter().zip(&map) {
                    d[si] += gi;
                }
            }
        }
        Op::Broadcast(src, count) => {
            if let Some(d) = slot(grads, nodes, *src) {
                let n = d.len();
                for c in 0..*count {
                    add_into(d, &g[c * n..(c + 1) * n]);
                }
            }
        }
        Op::Sum(src, axis) | Op::Mean(src, axis) => {
            let (outer, len, inner) = axis_split(nodes[*src].value.shape(), *axis);
            let f = if matches!(node.op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
            if let Some(d) = slot(grads, nodes, *src) {
                for o in 0..outer {
                    let gs = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for (d, g) in d[base..base + inner].iter_mut().zip(gs) {
                            *d += g * f;
                        }
                    }
                }
            }
        }
        Op::SumAll(src) => {
            if let Some(d) = slot(grads, nodes, *src) {
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }
        }
        Op::Exp(src) => {
            if let Some(d) = slot(grads, nodes, *src) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y;
                }
            }
        }
        Op::Log(src) => {
            let x = val(*src);
            if let Some(d) = slot(grads, nodes, *src) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                    *d += g / x;
                }
            }
        }
        Op::Tanh(src) => {
            if let Some(d) = slot(grads, nodes, *src) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(src) => {
            if let Some(d) = slot(grads, nodes, *src) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        Op::Relu(src) => {
            let x = val(*src);
            if let Some(d) = slot(grads, nodes, *src) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::Softmax { src, axis } => {
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            if let Some(d) = slot(grads, nodes, *src) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| out[idx(l)] * g[idx(l)]).sum();
                        for l in 0..len {
                            d[idx(l)] += out[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(src) => {
            let n = *node.value.shape().last().expect("rank >= 1");
            if let Some(d) = slot(grads, nodes, *src) {
                for ((d, g), y) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.chunks_exact(n)) {
                    let gsum: f64 = g.iter().sum();
                    for j in 0..n {
                        d[j] += g[j] - y[j].exp() * gsum;
                    }
                }
            }
        }
        Op::L2Norm(src, axis) => {
            let (outer, len, inner) = axis_split(nodes[*src].value.shape(), *axis);
            let x = val(*src);
            if let Some(d) = slot(grads, nodes, *src) {
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = out[o * inner + i];
                        if norm < NORM_EPS {
                            continue;
                        }
                        let f = g[o * inner + i] / norm;
                        for l in 0..len {
                            let k = (o * len + l) * inner + i;
                            d[k] += f * x[k];
                        }
                    }
                }
            }
        }
        Op::Normalize(src) => {
            let n = *node.value.shape().last().expect("rank >= 1");
            let x = val(*src);
            if let Some(d) = slot(grads, nodes, *src) {
                for (((d, g), y), x) in d
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(out.chunks_exact(n))
                    .zip(x.chunks_exact(n))
                {
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm < NORM_EPS {
                        continue;
                    }
                    let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[j] += (g[j] - y[j] * yg) / norm;
                    }
                }
            }
        }
        Op::Cosine(a, b) => {
            let n = *nodes[*a].value.shape().last().expect("rank >= 1");
            let (x, y) = (val(*a), val(*b));
            // d cos / dp = q/(|p||q|) - cos·p/|p|²
            let partial = |p: &[f64], q: &[f64], c: f64, np: f64, nq: f64, gr: f64, d: &mut [f64]| {
                for j in 0..n {
                    d[j] += gr * (q[j] / (np * nq) - c * p[j] / (np * np));
                }
            };
            for (which, target) in [(0, *a), (1, *b)] {
                if let Some(d) = slot(grads, nodes, target) {
                    for r in 0..g.len() {
                        let (p, q) = (&x[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                        let (c, np, nq) = cosine_parts(p, q);
                        if np < NORM_EPS || nq < NORM_EPS {
                            continue;
                        }
                        let dst = &mut d[r * n..(r + 1) * n];
                        if which == 0 {
                            partial(p, q, c, np, nq, g[r], dst);
                        } else {
                            partial(q, p, c, nq, np, g[r], dst);
                        }
                    }
                }
            }
        }
        Op::Conv2d { x, w, b, spec } => {
            let geo = ConvGeometry::new(nodes[*x].value.shape(), nodes[*w].value.shape(), *spec)
                .expect("validated in forward");
            let (xd, wd) = (val(*x), val(*w));
            let (hw, ck) = (geo.hw(), geo.ck());
            if let Some(bid) = b {
                if let Some(d) = slot(grads, nodes, *bid) {
                    for n in 0..geo.n {
                        let gn = &g[n * geo.out_len()..(n + 1) * geo.out_len()];
                        for (o, row) in gn.chunks_exact(hw).enumerate() {
                            d[o] += row.iter().sum::<f64>();
                        }
                    }
                }
            }
            if let Some(d) = slot(grads, nodes, *w) {
                let mut col = vec![0.0; ck * hw];
                for n in 0..geo.n {
                    geo.im2col(&xd[n * geo.in_len()..(n + 1) * geo.in_len()], &mut col);
                    let gn = &g[n * geo.out_len()..(n + 1) * geo.out_len()];
                    gemm(geo.out_c, hw, ck, gn, Layout::row_major(hw), &col, Layout::transposed(hw), 1.0, d);
                }
            }
            if let Some(d) = slot(grads, nodes, *x) {
                let mut dcol = vec![0.0; ck * hw];
                for n in 0..geo.n {
                    let gn = &g[n * geo.out_len()..(n + 1) * geo.out_len()];
                    gemm(ck, geo.out_c, hw, wd, Layout::transposed(ck), gn, Layout::row_major(hw), 0.0, &mut dcol);
                    geo.col2im(&dcol, &mut d[n * geo.in_len()..(n + 1) * geo.in_len()]);
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(d) = slot(grads, nodes, *x) {
                for (g, &i) in g.iter().zip(argmax) {
                    d[i] += g;
                }
            }
        }
        Op::AvgPool2d { x, size, stride } => {
            let s = nodes[*x].value.shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
            let area = (size * size) as f64;
            if let Some(d) = slot(grads, nodes, *x) {
                for plane in 0..s[0] * s[1] {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let gv = g[(plane * oh + oi) * ow + oj] / area;
                            for ki in 0..*size {
                                for kj in 0..*size {
                                    d[plane * h * w + (oi * stride + ki) * w + oj * stride + kj] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let e = nodes[*table].value.shape()[1];
            if let Some(d) = slot(grads, nodes, *table) {
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut d[i * e..(i + 1) * e], &g[r * e..(r + 1) * e]);
                }
            }
        }
        Op::Pick { src, idx } => {
            let n = *nodes[*src].value.shape().last().expect("rank >= 1");
            if let Some(d) = slot(grads, nodes, *src) {
                for (r, &i) in idx.iter().enumerate() {
                    d[r * n + i] += g[r];
                }
            }
        }
        Op::MaskedMax { src, argmax } => {
            if let Some(d) = slot(grads, nodes, *src) {
                for (g, &i) in g.iter().zip(argmax) {
                    d[i] += g;
                }
            }
        }
    }
}
