//! Tape-based reverse-mode differentiation over small dense arrays.
//!
//! A [`Graph`] is an append-only tape. Every primitive evaluates its value
//! eagerly and records its parents; [`Graph::backward`] walks the tape in
//! reverse insertion order and accumulates gradients into each node's slot.
//!
//! Row-wise kernels (`l2_norm_sq`, `inf_norm`, `topk_margin`, `kl_div`,
//! `cross_entropy`) reduce the last axis: a rank-1 input yields a scalar and
//! a `(batch, k)` input yields a `(batch,)` vector.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mixing weight applied to both arguments of `kl_div` before taking logs.
pub const KL_SMOOTHING: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is laid over the left operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right operand is a single value.
    Scalar,
    /// Right operand has one entry per row of a `(rows, cols)` left operand.
    Rows,
    /// Right operand has one entry per column (trailing axis).
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Binary { kind: BinaryKind, a: NodeId, b: NodeId, bcast: Broadcast },
    Scale(NodeId, f64),
    Shift(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    L2NormSq(NodeId),
    InfNorm { x: NodeId, argmax: Vec<usize> },
    TopkMargin { x: NodeId, top: Vec<(usize, usize)> },
    KlDiv(NodeId, NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    L1Sum(NodeId),
    Clip { x: NodeId, lo: f64, hi: f64 },
    Softplus(NodeId),
    Detach(NodeId),
    StraightThrough(NodeId),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::L2NormSq(_) => "l2_norm_sq",
            Op::InfNorm { .. } => "inf_norm",
            Op::TopkMargin { .. } => "topk_margin",
            Op::KlDiv(..) => "kl_div",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L1Sum(_) => "l1_sum",
            Op::Clip { .. } => "clip",
            Op::Softplus(_) => "softplus",
            Op::Detach(_) => "detach",
            Op::StraightThrough(_) => "straight_through",
            Op::Reshape(_) => "reshape",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Binary { a, b, .. } | Op::KlDiv(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::L2NormSq(a)
            | Op::L1Sum(a)
            | Op::Softplus(a)
            | Op::Detach(a)
            | Op::StraightThrough(a)
            | Op::Reshape(a) => vec![*a],
            Op::InfNorm { x, .. } | Op::TopkMargin { x, .. } | Op::Clip { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }

    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }

    pub fn parents(&self) -> Vec<NodeId> {
        self.op.parents()
    }
}

/// Gradients of the backprop root with respect to every leaf that requires them.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn smooth(p: f64, k: usize) -> f64 {
    (1.0 - KL_SMOOTHING) * p + KL_SMOOTHING / k as f64
}

/// Output shape of a kernel reducing the last axis.
fn row_reduced_shape(shape: &[usize]) -> Vec<usize> {
    match shape {
        [r, _] => vec![*r],
        _ => vec![],
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        let requires_grad = match &op {
            Op::Detach(_) => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Ok(NodeId(id))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    /// `x · Wᵀ + b` with `W` stored as `(out, in)`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, inp) = xv.rows_cols();
        let ok = xv.rank() >= 1
            && wv.rank() == 2
            && wv.shape()[1] == inp
            && bv.shape() == [wv.shape()[0]];
        if !ok {
            return Err(Error::shape("affine", &[xv.shape(), wv.shape(), bv.shape()]));
        }
        let out = wv.shape()[0];
        let mut y = Vec::with_capacity(batch * out);
        for r in 0..batch {
            let xr = xv.row(r);
            for o in 0..out {
                let wr = &wv.data()[o * inp..(o + 1) * inp];
                let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
                y.push(dot + bv.data()[o]);
            }
        }
        let shape = if xv.rank() == 1 { vec![out] } else { vec![batch, out] };
        self.push(Tensor::new(shape, y), Op::Affine { x, w, b })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    /// Row-wise softmax, shifted by the row maximum.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.rank() == 0 {
            return Err(Error::shape("softmax", &[av.shape()]));
        }
        let (rows, cols) = av.rows_cols();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_row(av.row(r), &mut out[r * cols..(r + 1) * cols]);
        }
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, out), Op::Softmax(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    fn check_bcast(&self, name: &'static str, a: NodeId, b: NodeId, bcast: Broadcast) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        let (rows, cols) = av.rows_cols();
        let ok = match bcast {
            Broadcast::Same => av.shape() == bv.shape(),
            Broadcast::Scalar => bv.len() == 1,
            Broadcast::Rows => av.rank() == 2 && bv.rank() == 1 && bv.len() == rows,
            Broadcast::Cols => av.rank() >= 1 && bv.rank() == 1 && bv.len() == cols,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape(name, &[av.shape(), bv.shape()]))
        }
    }

    /// Index into the right operand for flat index `i` of the left operand.
    fn bcast_index(bcast: Broadcast, i: usize, cols: usize) -> usize {
        match bcast {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Rows => i / cols,
            Broadcast::Cols => i % cols,
        }
    }

    fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId, bcast: Broadcast) -> Result<NodeId> {
        let name = Op::Binary { kind, a, b, bcast }.name();
        self.check_bcast(name, a, b, bcast)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (_, cols) = av.rows_cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv.data()[Self::bcast_index(bcast, i, cols)];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        let v = Tensor::new(av.shape().to_vec(), data);
        self.push(v, Op::Binary { kind, a, b, bcast })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b, Broadcast::Same)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b, Broadcast::Same)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b, Broadcast::Same)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b, Broadcast::Same)
    }

    pub fn add_bcast(&mut self, a: NodeId, b: NodeId, bcast: Broadcast) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b, bcast)
    }

    pub fn sub_bcast(&mut self, a: NodeId, b: NodeId, bcast: Broadcast) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b, bcast)
    }

    pub fn mul_bcast(&mut self, a: NodeId, b: NodeId, bcast: Broadcast) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b, bcast)
    }

    pub fn div_bcast(&mut self, a: NodeId, b: NodeId, bcast: Broadcast) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b, bcast)
    }

    /// `k · a` for a fixed constant `k`.
    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        self.unary(a, Op::Scale(a, k), |v| v * k)
    }

    /// `a + c` for a fixed constant `c`.
    pub fn shift(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, Op::Shift(a), |v| v + c)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::shape("mean", &[av.shape()]));
        }
        let m = av.sum() / av.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    fn row_kernel(&self, name: &'static str, a: NodeId) -> Result<(usize, usize, Vec<usize>)> {
        let av = self.value(a);
        if av.rank() == 0 || av.rank() > 2 {
            return Err(Error::shape(name, &[av.shape()]));
        }
        let (r, c) = av.rows_cols();
        Ok((r, c, row_reduced_shape(av.shape())))
    }

    /// Row-wise `Σ xᵢ²`.
    pub fn l2_norm_sq(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, _, shape) = self.row_kernel("l2_norm_sq", a)?;
        let av = self.value(a);
        let out = (0..rows).map(|r| av.row(r).iter().map(|v| v * v).sum()).collect();
        self.push(Tensor::new(shape, out), Op::L2NormSq(a))
    }

    /// Row-wise `max |xᵢ|`; the subgradient goes to the first attaining index.
    pub fn inf_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, _, shape) = self.row_kernel("inf_norm", a)?;
        let av = self.value(a);
        let mut argmax = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = av.row(r);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if v.abs() > row[best].abs() {
                    best = i;
                }
            }
            argmax.push(best);
            out.push(row[best].abs());
        }
        self.push(Tensor::new(shape, out), Op::InfNorm { x: a, argmax })
    }

    /// Row-wise half gap between the two largest entries.
    pub fn topk_margin(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols, shape) = self.row_kernel("topk_margin", a)?;
        if cols < 2 {
            return Err(Error::shape("topk_margin", &[self.value(a).shape()]));
        }
        let av = self.value(a);
        let mut top = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (i1, i2) = top_two(av.row(r));
            top.push((i1, i2));
            out.push((av.row(r)[i1] - av.row(r)[i2]) / 2.0);
        }
        self.push(Tensor::new(shape, out), Op::TopkMargin { x: a, top })
    }

    /// Row-wise `KL(p ‖ q)` on smoothed distributions.
    pub fn kl_div(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (rows, cols, shape) = self.row_kernel("kl_div", p)?;
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() {
            return Err(Error::shape("kl_div", &[pv.shape(), qv.shape()]));
        }
        let out = (0..rows)
            .map(|r| {
                pv.row(r)
                    .iter()
                    .zip(qv.row(r))
                    .map(|(&a, &b)| {
                        let (a, b) = (smooth(a, cols), smooth(b, cols));
                        a * (a.ln() - b.ln())
                    })
                    .sum()
            })
            .collect();
        self.push(Tensor::new(shape, out), Op::KlDiv(p, q))
    }

    /// Row-wise cross entropy of integer labels against logits.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, cols, shape) = self.row_kernel("cross_entropy", logits)?;
        if labels.len() != rows || labels.iter().any(|&y| y >= cols) {
            return Err(Error::shape("cross_entropy", &[self.value(logits).shape(), &[labels.len()]]));
        }
        let lv = self.value(logits);
        let out = (0..rows)
            .map(|r| {
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[labels[r]]
            })
            .collect();
        self.push(Tensor::new(shape, out), Op::CrossEntropy { logits, labels: labels.to_vec() })
    }

    /// `Σ |xᵢ|` over all entries.
    pub fn l1_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::L1Sum(a))
    }

    /// Gradient passes on the closed interval `[lo, hi]`.
    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clip bounds {lo} > {hi}")));
        }
        self.unary(a, Op::Clip { x: a, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Same value; no gradient flows back through this edge.
    pub fn detach(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).clone();
        self.push(v, Op::Detach(a))
    }

    /// Forward value `hard`, identity gradient into `soft`.
    ///
    /// Equivalent to `detach(hard - soft) + soft` but returns `hard` exactly,
    /// without the rounding of the subtract/add pair.
    pub fn straight_through(&mut self, hard: Tensor, soft: NodeId) -> Result<NodeId> {
        if hard.shape() != self.value(soft).shape() {
            return Err(Error::shape("straight_through", &[hard.shape(), self.value(soft).shape()]));
        }
        self.push(hard, Op::StraightThrough(soft))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(Error::shape("reshape", &[av.shape(), shape]));
        }
        let v = av.reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate into each
    /// node's slot; returned map covers leaves with `requires_grad`.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        let root_shape = self.value(root).shape().to_vec();
        if root_shape.iter().product::<usize>() != 1 || root_shape.len() > 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if self.nodes[root.0].requires_grad {
            self.nodes[root.0].grad = Some(Tensor::full(&root_shape, 1.0));
        }

        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else { continue };
            let contributions = self.local_grads(id, &g);
            self.nodes[id].grad = Some(g);
            for (parent, contrib) in contributions {
                let pn = &mut self.nodes[parent.0];
                if !pn.requires_grad {
                    continue;
                }
                match &mut pn.grad {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let map = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.is_leaf() && n.requires_grad)
            .map(|(i, n)| {
                let g = n.grad.clone().unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (NodeId(i), g)
            })
            .collect();
        Ok(Gradients { map })
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn local_grads(&self, id: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let needs = |p: NodeId| self.nodes[p.0].requires_grad;
        let elementwise = |a: NodeId, f: &dyn Fn(usize, f64) -> f64| {
            let av = self.value(a);
            let data = g.data().iter().enumerate().map(|(i, &gi)| gi * f(i, av.data()[i])).collect();
            vec![(a, Tensor::new(av.shape().to_vec(), data))]
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, inp) = xv.rows_cols();
                let outd = wv.shape()[0];
                let gd = g.data();
                let mut res = Vec::new();
                if needs(*x) {
                    let mut dx = vec![0.0; batch * inp];
                    for r in 0..batch {
                        let dxr = &mut dx[r * inp..(r + 1) * inp];
                        for o in 0..outd {
                            let go = gd[r * outd + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv.data()[o * inp..(o + 1) * inp];
                            for (d, w) in dxr.iter_mut().zip(wr) {
                                *d += go * w;
                            }
                        }
                    }
                    res.push((*x, Tensor::new(xv.shape().to_vec(), dx)));
                }
                if needs(*w) {
                    let mut dw = vec![0.0; outd * inp];
                    for r in 0..batch {
                        let xr = xv.row(r);
                        for o in 0..outd {
                            let go = gd[r * outd + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (d, xi) in dw[o * inp..(o + 1) * inp].iter_mut().zip(xr) {
                                *d += go * xi;
                            }
                        }
                    }
                    res.push((*w, Tensor::matrix(outd, inp, dw)));
                }
                if needs(*b) {
                    let mut db = vec![0.0; outd];
                    for r in 0..batch {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += gd[r * outd + o];
                        }
                    }
                    res.push((*b, Tensor::vector(db)));
                }
                res
            }
            Op::Relu(a) => elementwise(*a, &|_, x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Softmax(a) => {
                let (rows, cols) = out.rows_cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let s = out.row(r);
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = s[c] * (gr[c] - dot);
                    }
                }
                vec![(*a, Tensor::new(out.shape().to_vec(), d))]
            }
            Op::Log(a) => elementwise(*a, &|_, x| 1.0 / x),
            Op::Exp(a) => elementwise(*a, &|i, _| out.data()[i]),
            Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (_, cols) = av.rows_cols();
                let mut res = Vec::new();
                if needs(*a) {
                    let d = (0..av.len())
                        .map(|i| {
                            let y = bv.data()[Self::bcast_index(*bcast, i, cols)];
                            g.data()[i]
                                * match kind {
                                    BinaryKind::Add | BinaryKind::Sub => 1.0,
                                    BinaryKind::Mul => y,
                                    BinaryKind::Div => 1.0 / y,
                                }
                        })
                        .collect();
                    res.push((*a, Tensor::new(av.shape().to_vec(), d)));
                }
                if needs(*b) {
                    let mut d = vec![0.0; bv.len()];
                    for i in 0..av.len() {
                        let j = Self::bcast_index(*bcast, i, cols);
                        let (x, y) = (av.data()[i], bv.data()[j]);
                        d[j] += g.data()[i]
                            * match kind {
                                BinaryKind::Add => 1.0,
                                BinaryKind::Sub => -1.0,
                                BinaryKind::Mul => x,
                                BinaryKind::Div => -x / (y * y),
                            };
                    }
                    res.push((*b, Tensor::new(bv.shape().to_vec(), d)));
                }
                res
            }
            Op::Scale(a, k) => elementwise(*a, &|_, _| *k),
            Op::Shift(a) => elementwise(*a, &|_, _| 1.0),
            Op::Sum(a) => {
                let av = self.value(*a);
                vec![(*a, Tensor::full(av.shape(), g.item()))]
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                vec![(*a, Tensor::full(av.shape(), g.item() / av.len() as f64))]
            }
            Op::Square(a) => elementwise(*a, &|_, x| 2.0 * x),
            Op::Sqrt(a) => elementwise(*a, &|i, _| 0.5 / out.data()[i]),
            Op::L2NormSq(a) => self.row_backward(*a, g, |_, _, x| 2.0 * x),
            Op::InfNorm { x, argmax } => {
                self.row_backward(*x, g, |r, c, v| if c == argmax[r] { sign(v) } else { 0.0 })
            }
            Op::TopkMargin { x, top } => self.row_backward(*x, g, |r, c, _| {
                let (i1, i2) = top[r];
                if c == i1 {
                    0.5
                } else if c == i2 {
                    -0.5
                } else {
                    0.0
                }
            }),
            Op::KlDiv(p, q) => {
                let (pv, qv) = (self.value(*p), self.value(*q));
                let (_, cols) = pv.rows_cols();
                let k = 1.0 - KL_SMOOTHING;
                let mut res = Vec::new();
                if needs(*p) {
                    res.extend(self.row_backward(*p, g, |r, c, a| {
                        let (a, b) = (smooth(a, cols), smooth(qv.row(r)[c], cols));
                        k * (a.ln() - b.ln() + 1.0)
                    }));
                }
                if needs(*q) {
                    res.extend(self.row_backward(*q, g, |r, c, b| {
                        let (a, b) = (smooth(pv.row(r)[c], cols), smooth(b, cols));
                        -k * a / b
                    }));
                }
                res
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (rows, cols) = lv.rows_cols();
                let mut probs = vec![0.0; rows * cols];
                for r in 0..rows {
                    softmax_row(lv.row(r), &mut probs[r * cols..(r + 1) * cols]);
                }
                self.row_backward(*logits, g, |r, c, _| {
                    probs[r * cols + c] - if c == labels[r] { 1.0 } else { 0.0 }
                })
            }
            Op::L1Sum(a) => {
                let av = self.value(*a);
                let g0 = g.item();
                vec![(*a, av.map(|x| g0 * sign(x)))]
            }
            Op::Clip { x, lo, hi } => {
                elementwise(*x, &|_, v| if *lo <= v && v <= *hi { 1.0 } else { 0.0 })
            }
            Op::Softplus(a) => elementwise(*a, &|_, x| sigmoid(x)),
            Op::Detach(_) => vec![],
            Op::StraightThrough(a) => vec![(*a, g.clone())],
            Op::Reshape(a) => vec![(*a, g.reshaped(self.value(*a).shape()))],
        }
    }

    /// Backward of a last-axis reduction: `dx[r,c] = g[r] · f(r, c, x[r,c])`.
    fn row_backward(
        &self,
        a: NodeId,
        g: &Tensor,
        f: impl Fn(usize, usize, f64) -> f64,
    ) -> Vec<(NodeId, Tensor)> {
        let av = self.value(a);
        let (rows, cols) = av.rows_cols();
        let mut d = vec![0.0; rows * cols];
        for r in 0..rows {
            let gr = g.data()[r];
            for c in 0..cols {
                d[r * cols + c] = gr * f(r, c, av.row(r)[c]);
            }
        }
        vec![(a, Tensor::new(av.shape().to_vec(), d))]
    }
}

/// Indices of the largest and second-largest entries, first index winning ties.
pub fn top_two(row: &[f64]) -> (usize, usize) {
    let mut i1 = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[i1] {
            i1 = i;
        }
    }
    let mut i2 = if i1 == 0 { 1 } else { 0 };
    for (i, &v) in row.iter().enumerate() {
        if i != i1 && v > row[i2] {
            i2 = i;
        }
    }
    (i1, i2)
}
