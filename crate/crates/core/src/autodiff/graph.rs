//! Reverse-mode differentiation over a closed set of dense ops.
//!
//! Nodes are appended in topological order: every op only refers to nodes
//! that already exist, so the node list is acyclic by construction. Building
//! a node checks shapes; values are produced by [`Graph::forward`].

use std::sync::Arc;

use super::tensor::{matmul, matmul_a_bt, matmul_at_b, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel in a [`Op::Gather`] index meaning "write zero" (used for padding).
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Clone, Debug)]
pub enum Op {
    Leaf {
        trainable: bool,
    },
    /// `[n,k] x [k,m]`
    MatMul(NodeId, NodeId),
    /// `[n,k] + [1,k]`, bias broadcast over rows.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// Sum of all entries into a `[1]` scalar.
    Sum(NodeId),
    /// Column-wise concatenation of matrices with equal row counts.
    Concat(Vec<NodeId>),
    /// Pairwise cosine similarity of rows: `[n,d] x [m,d] -> [n,m]`.
    CosineSim(NodeId, NodeId),
    /// Per-row log-sum-exp over the entries where `mask` is true: `[n,m] -> [n,1]`.
    LogSumExpRows {
        input: NodeId,
        mask: Option<Arc<[bool]>>,
    },
    /// Diagonal of a square matrix as a column: `[n,n] -> [n,1]`.
    Diag(NodeId),
    /// `out[i] = input[index[i]]`, or 0 where the index is [`GATHER_ZERO`].
    Gather {
        input: NodeId,
        index: Arc<[u32]>,
    },
    Reshape(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Concat(_) => "concat",
            Op::CosineSim(..) => "cosine_sim",
            Op::LogSumExpRows { .. } => "log_sum_exp",
            Op::Diag(_) => "diag",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::CosineSim(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Diag(a)
            | Op::Reshape(a) => vec![*a],
            Op::LogSumExpRows { input, .. } | Op::Gather { input, .. } => vec![*input],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by leaf id. Only trainable leaves are populated.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => (s[0], s[1..].iter().product()),
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

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        let requires_grad = match &op {
            Op::Leaf { trainable } => *trainable,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf with a bound value.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Leaf { trainable: true }, shape, Some(value))
    }

    /// Non-trainable leaf with a bound value.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Leaf { trainable: false }, shape, Some(value))
    }

    /// Non-trainable leaf that must be bound through the feed.
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Leaf { trainable: false }, shape.to_vec(), None)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }

    /// Trainable leaves that `out` depends on, in creation order.
    pub fn trainable_ancestors(&self, out: NodeId) -> Vec<NodeId> {
        let mut reach = vec![false; out.0 + 1];
        reach[out.0] = true;
        for i in (0..=out.0).rev() {
            if reach[i] {
                for x in self.nodes[i].op.inputs() {
                    reach[x.0] = true;
                }
            }
        }
        (0..=out.0)
            .map(NodeId)
            .filter(|&id| reach[id.0] && self.is_trainable(id))
            .collect()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or(Error::UnboundLeaf(id.0))
    }

    /// Smallest |x| over the inputs of every ReLU node, from the last forward pass.
    /// Finite-difference checks use this to avoid points sitting on a kink.
    pub fn min_abs_relu_input(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => self.nodes[x.0].value.as_ref(),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    // ---- builders -------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = dims2(self.shape(a));
        let (k2, m) = dims2(self.shape(b));
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.push(Op::MatMul(a, b), vec![n, m], None))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, k) = dims2(self.shape(x));
        let (br, bk) = dims2(self.shape(bias));
        if self.shape(x).len() != 2 || br != 1 || bk != k {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::AddBias(x, bias), shape, None))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), shape, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), shape, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), shape, None))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(x, factor), shape, None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu(x), shape, None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Tanh(x), shape, None)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Exp(x), shape, None)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Log(x), shape, None)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), vec![1], None)
    }

    /// Mean of all entries.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n: usize = self.shape(x).iter().product();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let rows = dims2(self.shape(first)).0;
        let mut cols = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape(
                    "concat",
                    format!("input {:?} does not have {rows} rows", s),
                ));
            }
            cols += s[1];
        }
        Ok(self.push(Op::Concat(xs.to_vec()), vec![rows, cols], None))
    }

    pub fn cosine_sim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = dims2(self.shape(a));
        let (m, d2) = dims2(self.shape(b));
        if d != d2 {
            return Err(Error::shape(
                "cosine_sim",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.push(Op::CosineSim(a, b), vec![n, m], None))
    }

    pub fn log_sum_exp_rows(&mut self, x: NodeId, mask: Option<Vec<bool>>) -> Result<NodeId> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::shape("log_sum_exp", format!("{shape:?}")));
        }
        let (n, m) = (shape[0], shape[1]);
        if let Some(mask) = &mask {
            if mask.len() != n * m {
                return Err(Error::shape(
                    "log_sum_exp",
                    format!("mask has {} entries for {n}x{m}", mask.len()),
                ));
            }
            if mask.chunks_exact(m).any(|row| !row.iter().any(|&b| b)) {
                return Err(Error::shape("log_sum_exp", "a mask row selects nothing"));
            }
        }
        let mask = mask.map(Arc::from);
        Ok(self.push(Op::LogSumExpRows { input: x, mask }, vec![n, 1], None))
    }

    pub fn diag(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::shape("diag", format!("{shape:?} is not square")));
        }
        let n = shape[0];
        Ok(self.push(Op::Diag(x), vec![n, 1], None))
    }

    pub fn gather(&mut self, x: NodeId, index: Arc<[u32]>, shape: &[usize]) -> Result<NodeId> {
        let len: usize = self.shape(x).iter().product();
        let out: usize = shape.iter().product();
        if out != index.len() || shape.contains(&0) {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {shape:?}", index.len()),
            ));
        }
        if index.iter().any(|&i| i != GATHER_ZERO && i as usize >= len) {
            return Err(Error::shape("gather", "index out of range"));
        }
        Ok(self.push(Op::Gather { input: x, index }, shape.to_vec(), None))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let len: usize = self.shape(x).iter().product();
        if shape.iter().product::<usize>() != len || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        Ok(self.push(Op::Reshape(x), shape.to_vec(), None))
    }

    // ---- evaluation -----------------------------------------------------

    /// Binds `feed` to leaves and evaluates every op node in order.
    pub fn forward(&mut self, feed: &[(NodeId, Tensor)]) -> Result<()> {
        for (id, t) in feed {
            let node = self
                .nodes
                .get_mut(id.0)
                .ok_or_else(|| Error::shape("feed", format!("unknown node {}", id.0)))?;
            if !matches!(node.op, Op::Leaf { .. }) {
                return Err(Error::shape("feed", format!("node {} is not a leaf", id.0)));
            }
            if node.shape != t.shape() {
                return Err(Error::shape(
                    "feed",
                    format!(
                        "node {} expects {:?}, got {:?}",
                        id.0,
                        node.shape,
                        t.shape()
                    ),
                ));
            }
            node.value = Some(t.clone());
        }
        for i in 0..self.nodes.len() {
            if let Op::Leaf { .. } = self.nodes[i].op {
                if self.nodes[i].value.is_none() {
                    return Err(Error::UnboundLeaf(i));
                }
                continue;
            }
            let value = self.compute(i)?;
            if cfg!(debug_assertions) && !value.is_finite() {
                return Err(Error::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
        }
        Ok(())
    }

    /// Runs [`Graph::forward`] and returns a copy of `output`'s value.
    pub fn forward_eval(&mut self, output: NodeId, feed: &[(NodeId, Tensor)]) -> Result<Tensor> {
        self.forward(feed)?;
        self.value(output).cloned()
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    fn compute(&self, i: usize) -> Result<Tensor> {
        let shape = self.nodes[i].shape.clone();
        let data = match &self.nodes[i].op {
            Op::Leaf { .. } => unreachable!("leaves are not computed"),
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.shape(*a));
                let m = shape[1];
                matmul(self.val(*a).data(), self.val(*b).data(), n, k, m)
            }
            Op::AddBias(x, b) => {
                let bias = self.val(*b).data();
                let mut out = self.val(*x).data().to_vec();
                for row in out.chunks_exact_mut(bias.len()) {
                    for (o, bv) in row.iter_mut().zip(bias) {
                        *o += bv;
                    }
                }
                out
            }
            Op::Add(a, b) => zip_with(self.val(*a), self.val(*b), |x, y| x + y),
            Op::Sub(a, b) => zip_with(self.val(*a), self.val(*b), |x, y| x - y),
            Op::Mul(a, b) => zip_with(self.val(*a), self.val(*b), |x, y| x * y),
            Op::Scale(x, c) => self.val(*x).data().iter().map(|v| v * c).collect(),
            Op::Relu(x) => self.val(*x).data().iter().map(|v| v.max(0.0)).collect(),
            Op::Tanh(x) => self.val(*x).data().iter().map(|v| v.tanh()).collect(),
            Op::Exp(x) => self.val(*x).data().iter().map(|v| v.exp()).collect(),
            Op::Log(x) => self.val(*x).data().iter().map(|v| v.ln()).collect(),
            Op::Sum(x) => vec![self.val(*x).data().iter().sum()],
            Op::Concat(xs) => {
                let (rows, cols) = (shape[0], shape[1]);
                let mut out = vec![0.0; rows * cols];
                let mut offset = 0;
                for x in xs {
                    let w = self.shape(*x)[1];
                    let src = self.val(*x).data();
                    for r in 0..rows {
                        out[r * cols + offset..r * cols + offset + w]
                            .copy_from_slice(&src[r * w..(r + 1) * w]);
                    }
                    offset += w;
                }
                out
            }
            Op::CosineSim(a, b) => {
                let (na, nb) = (
                    normalized_rows(self.val(*a), i)?,
                    normalized_rows(self.val(*b), i)?,
                );
                let (n, d) = dims2(self.shape(*a));
                let m = shape[1];
                matmul_a_bt(&na.0, &nb.0, n, m, d)
            }
            Op::LogSumExpRows { input, mask } => {
                let x = self.val(*input).data();
                let m = self.shape(*input)[1];
                x.chunks_exact(m)
                    .enumerate()
                    .map(|(r, row)| {
                        let keep = |j: usize| mask.as_ref().is_none_or(|mk| mk[r * m + j]);
                        let max = (0..m)
                            .filter(|&j| keep(j))
                            .map(|j| row[j])
                            .fold(f64::NEG_INFINITY, f64::max);
                        let s: f64 = (0..m)
                            .filter(|&j| keep(j))
                            .map(|j| (row[j] - max).exp())
                            .sum();
                        max + s.ln()
                    })
                    .collect()
            }
            Op::Diag(x) => {
                let n = shape[0];
                let src = self.val(*x).data();
                (0..n).map(|k| src[k * n + k]).collect()
            }
            Op::Gather { input, index } => {
                let src = self.val(*input).data();
                index
                    .iter()
                    .map(|&k| {
                        if k == GATHER_ZERO {
                            0.0
                        } else {
                            src[k as usize]
                        }
                    })
                    .collect()
            }
            Op::Reshape(x) => self.val(*x).data().to_vec(),
        };
        Tensor::new(shape, data)
    }

    /// Reverse sweep from a scalar `loss` node. Every trainable leaf gets a
    /// gradient (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: loss_shape.to_vec(),
            });
        }
        self.value(loss)?;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_shape, 1.0));

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gin) in self.vjp(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gin),
                    slot @ None => *slot = Some(gin),
                }
            }
            // Keep non-leaf gradients released; only leaves are returned.
        }

        for (i, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Leaf { trainable: true } => {
                    if grads[i].is_none() {
                        grads[i] = Some(Tensor::zeros(&node.shape));
                    }
                }
                _ => grads[i] = None,
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products of node `i` for each input that needs one.
    fn vjp(&self, i: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        let gd = g.data();
        let mut out = Vec::with_capacity(2);
        let mk = |id: NodeId, data: Vec<f64>| {
            (
                id,
                Tensor::new(self.shape(id).to_vec(), data).expect("gradient shape"),
            )
        };
        let y = self.val(NodeId(i));
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (n, k) = dims2(self.shape(*a));
                let m = self.nodes[i].shape[1];
                if needs(a) {
                    out.push(mk(*a, matmul_a_bt(gd, self.val(*b).data(), n, k, m)));
                }
                if needs(b) {
                    out.push(mk(*b, matmul_at_b(self.val(*a).data(), gd, n, k, m)));
                }
            }
            Op::AddBias(x, b) => {
                if needs(x) {
                    out.push(mk(*x, gd.to_vec()));
                }
                if needs(b) {
                    let k = self.shape(*x)[1];
                    let mut gb = vec![0.0; k];
                    for row in gd.chunks_exact(k) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push(mk(*b, gb));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    out.push(mk(*a, gd.to_vec()));
                }
                if needs(b) {
                    out.push(mk(*b, gd.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    out.push(mk(*a, gd.to_vec()));
                }
                if needs(b) {
                    out.push(mk(*b, gd.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    out.push(mk(*a, zip_with(g, self.val(*b), |x, y| x * y)));
                }
                if needs(b) {
                    out.push(mk(*b, zip_with(g, self.val(*a), |x, y| x * y)));
                }
            }
            Op::Scale(x, c) => {
                if needs(x) {
                    out.push(mk(*x, gd.iter().map(|v| v * c).collect()));
                }
            }
            Op::Relu(x) => {
                if needs(x) {
                    let d = zip_with(g, self.val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                    out.push(mk(*x, d));
                }
            }
            Op::Tanh(x) => {
                if needs(x) {
                    out.push(mk(*x, zip_with(g, y, |gv, yv| gv * (1.0 - yv * yv))));
                }
            }
            Op::Exp(x) => {
                if needs(x) {
                    out.push(mk(*x, zip_with(g, y, |gv, yv| gv * yv)));
                }
            }
            Op::Log(x) => {
                if needs(x) {
                    out.push(mk(*x, zip_with(g, self.val(*x), |gv, xv| gv / xv)));
                }
            }
            Op::Sum(x) => {
                if needs(x) {
                    let n = self.val(*x).len();
                    out.push(mk(*x, vec![gd[0]; n]));
                }
            }
            Op::Concat(xs) => {
                let (rows, cols) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut offset = 0;
                for x in xs {
                    let w = self.shape(*x)[1];
                    if needs(x) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * cols + offset..r * cols + offset + w]);
                        }
                        out.push(mk(*x, d));
                    }
                    offset += w;
                }
            }
            Op::CosineSim(a, b) => {
                let (n, dim) = dims2(self.shape(*a));
                let m = self.nodes[i].shape[1];
                let (an, anorm) = normalized_rows(self.val(*a), i).expect("checked in forward");
                let (bn, bnorm) = normalized_rows(self.val(*b), i).expect("checked in forward");
                let s = y.data();
                if needs(a) {
                    // dA_i = (sum_j G_ij b̂_j - (sum_j G_ij S_ij) â_i) / |a_i|
                    let mut d = matmul(gd, &bn, n, m, dim);
                    for r in 0..n {
                        let gs: f64 = (0..m).map(|c| gd[r * m + c] * s[r * m + c]).sum();
                        for k in 0..dim {
                            d[r * dim + k] = (d[r * dim + k] - gs * an[r * dim + k]) / anorm[r];
                        }
                    }
                    out.push(mk(*a, d));
                }
                if needs(b) {
                    let mut d = matmul_at_b(gd, &an, n, m, dim);
                    for c in 0..m {
                        let gs: f64 = (0..n).map(|r| gd[r * m + c] * s[r * m + c]).sum();
                        for k in 0..dim {
                            d[c * dim + k] = (d[c * dim + k] - gs * bn[c * dim + k]) / bnorm[c];
                        }
                    }
                    out.push(mk(*b, d));
                }
            }
            Op::LogSumExpRows { input, mask } => {
                if needs(input) {
                    let x = self.val(*input).data();
                    let m = self.shape(*input)[1];
                    let mut d = vec![0.0; x.len()];
                    for (r, row) in x.chunks_exact(m).enumerate() {
                        let lse = y.data()[r];
                        for j in 0..m {
                            if mask.as_ref().is_none_or(|mk| mk[r * m + j]) {
                                d[r * m + j] = gd[r] * (row[j] - lse).exp();
                            }
                        }
                    }
                    out.push(mk(*input, d));
                }
            }
            Op::Diag(x) => {
                if needs(x) {
                    let n = self.nodes[i].shape[0];
                    let mut d = vec![0.0; n * n];
                    for k in 0..n {
                        d[k * n + k] = gd[k];
                    }
                    out.push(mk(*x, d));
                }
            }
            Op::Gather { input, index } => {
                if needs(input) {
                    let mut d = vec![0.0; self.val(*input).len()];
                    for (gv, &k) in gd.iter().zip(index.iter()) {
                        if k != GATHER_ZERO {
                            d[k as usize] += gv;
                        }
                    }
                    out.push(mk(*input, d));
                }
            }
            Op::Reshape(x) => {
                if needs(x) {
                    out.push(mk(*x, gd.to_vec()));
                }
            }
        }
        out
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

/// Row-normalized copy plus the row norms. Zero rows are a domain error.
fn normalized_rows(t: &Tensor, node: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (_, d) = t.dims2();
    let mut out = Vec::with_capacity(t.len());
    let mut norms = Vec::new();
    for row in t.data().chunks_exact(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::Domain(format!(
                "cosine similarity of a zero-norm vector (node {node})"
            )));
        }
        norms.push(norm);
        out.extend(row.iter().map(|v| v / norm));
    }
    Ok((out, norms))
}
