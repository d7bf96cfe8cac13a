//! Reverse-mode automatic differentiation over a recorded operation graph.
//!
//! A [`Tape`] is built once per model architecture: leaves declare shapes,
//! operation builders validate shapes immediately and append nodes in
//! topological order. [`Tape::forward`] evaluates every node for a given leaf
//! binding; [`Tape::backward`] replays the tape in reverse and returns the
//! gradient of a scalar loss with respect to every leaf.
//!
//! Elementwise binary ops align shapes at the trailing dimensions: operands of
//! equal shape combine directly, and an operand whose shape is a suffix of the
//! other's is tiled over the leading dimensions. No other broadcasting exists.

use crate::error::{Result, StadvError};
use crate::tensor::Tensor;

/// Handle to one node of a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[.., k] x [k, m] -> [.., m]`; rhs is strictly rank 2.
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SumAxis0(NodeId),
    MeanAxis0(NodeId),
    /// Tile a tensor whose shape is a suffix of the target shape.
    Broadcast(NodeId),
    /// Rows `[start, end)` along axis 0.
    SliceAxis0(NodeId, usize, usize),
    ConcatAxis0(Vec<NodeId>),
    /// Elementwise product with a fixed, non-differentiable mask.
    MaskedMul(NodeId, Tensor),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::SumAxis0(_) => "sum_axis0",
            Op::MeanAxis0(_) => "mean_axis0",
            Op::Broadcast(_) => "broadcast",
            Op::SliceAxis0(..) => "slice_axis0",
            Op::ConcatAxis0(_) => "concat_axis0",
            Op::MaskedMul(..) => "masked_mul",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
}

/// Leaf values for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    entries: Vec<(NodeId, Tensor)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings::default()
    }

    pub fn bind(mut self, id: NodeId, value: Tensor) -> Self {
        self.entries.push((id, value));
        self
    }

    pub fn set(&mut self, id: NodeId, value: Tensor) {
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == id) {
            slot.1 = value;
        } else {
            self.entries.push((id, value));
        }
    }
}

/// Value of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct Values {
    vals: Vec<Tensor>,
}

impl Values {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let t = self.get(id);
        debug_assert_eq!(t.numel(), 1);
        t.data()[0]
    }
}

/// Gradient of the loss with respect to every leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; leaves the loss never touched hold zeros.
    pub fn get(&self, id: NodeId) -> &Tensor {
        self.grads[id.0]
            .as_ref()
            .expect("gradient queried for a non-leaf node")
    }
}

/// True when `small` can tile to `big` by trailing-dimension alignment.
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn elementwise_shape(
    primitive: &'static str,
    lhs: &[usize],
    rhs: &[usize],
) -> Result<Vec<usize>> {
    if lhs == rhs {
        Ok(lhs.to_vec())
    } else if is_suffix(rhs, lhs) {
        Ok(lhs.to_vec())
    } else if is_suffix(lhs, rhs) {
        Ok(rhs.to_vec())
    } else {
        Err(StadvError::ShapeMismatch {
            primitive,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

/// Combine two tensors elementwise under the suffix-broadcast rule.
fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data).unwrap();
    }
    if is_suffix(b.shape(), a.shape()) {
        let s = b.numel().max(1);
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % s]))
            .collect();
        Tensor::new(a.shape().to_vec(), data).unwrap()
    } else {
        let s = a.numel().max(1);
        let data = b
            .data()
            .iter()
            .enumerate()
            .map(|(i, &y)| f(a.data()[i % s], y))
            .collect();
        Tensor::new(b.shape().to_vec(), data).unwrap()
    }
}

/// Reduce a full-shape gradient back onto a suffix-shaped operand.
fn reduce_to_suffix(grad: &Tensor, suffix_shape: &[usize]) -> Tensor {
    if grad.shape() == suffix_shape {
        return grad.clone();
    }
    let s: usize = suffix_shape.iter().product::<usize>().max(1);
    let mut out = vec![0.0; s];
    for (i, &g) in grad.data().iter().enumerate() {
        out[i % s] += g;
    }
    Tensor::new(suffix_shape.to_vec(), out).unwrap()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape });
        id
    }

    /// Differentiable input with a declared shape.
    pub fn leaf(&mut self, shape: &[usize]) -> NodeId {
        let id = self.push(Op::Leaf, shape.to_vec());
        self.leaves.push(id);
        id
    }

    /// Fixed value embedded in the tape; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = elementwise_shape("add", self.shape(a), self.shape(b))?;
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = elementwise_shape("sub", self.shape(a), self.shape(b))?;
        Ok(self.push(Op::Sub(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = elementwise_shape("mul", self.shape(a), self.shape(b))?;
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(StadvError::ShapeMismatch {
                primitive: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(sb[1]);
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Relu(a), shape)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sigmoid(a), shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Abs(a), shape)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Square(a), shape)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Sqrt(a), shape)
    }

    /// Sum of every element; scalar result of shape `[1]`.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll(a), vec![1])
    }

    /// Mean of every element; scalar result of shape `[1]`.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAll(a), vec![1])
    }

    pub fn sum_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(StadvError::ShapeMismatch {
                primitive: "sum_axis0",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let shape = s[1..].to_vec();
        Ok(self.push(Op::SumAxis0(a), shape))
    }

    pub fn mean_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(StadvError::ShapeMismatch {
                primitive: "mean_axis0",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let shape = s[1..].to_vec();
        Ok(self.push(Op::MeanAxis0(a), shape))
    }

    /// Tile `a` (whose shape must be a suffix of `target`) up to `target`.
    pub fn broadcast(&mut self, a: NodeId, target: &[usize]) -> Result<NodeId> {
        if !is_suffix(self.shape(a), target) {
            return Err(StadvError::ShapeMismatch {
                primitive: "broadcast",
                lhs: self.shape(a).to_vec(),
                rhs: target.to_vec(),
            });
        }
        Ok(self.push(Op::Broadcast(a), target.to_vec()))
    }

    pub fn slice_axis0(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start >= end || end > s[0] {
            return Err(StadvError::invalid(format!(
                "slice_axis0 range {}..{} invalid for shape {:?}",
                start, end, s
            )));
        }
        let mut shape = s;
        shape[0] = end - start;
        Ok(self.push(Op::SliceAxis0(a, start, end), shape))
    }

    pub fn concat_axis0(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(StadvError::invalid("concat_axis0 of zero tensors"));
        }
        let rest = self.shape(parts[0])[1..].to_vec();
        let mut d0 = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != rest[..] {
                return Err(StadvError::ShapeMismatch {
                    primitive: "concat_axis0",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            d0 += s[0];
        }
        let mut shape = vec![d0];
        shape.extend_from_slice(&rest);
        Ok(self.push(Op::ConcatAxis0(parts.to_vec()), shape))
    }

    /// Elementwise product with a fixed 0/1 (or arbitrary) mask that never
    /// receives gradient. The mask shape must equal the operand shape.
    pub fn masked_mul(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        if self.shape(a) != mask.shape() {
            return Err(StadvError::ShapeMismatch {
                primitive: "masked_mul",
                lhs: self.shape(a).to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let shape = mask.shape().to_vec();
        Ok(self.push(Op::MaskedMul(a, mask), shape))
    }

    /// Evaluate every node. Deterministic and pure: identical bindings give
    /// bit-identical results.
    pub fn forward(&self, bindings: &Bindings) -> Result<Values> {
        let mut bound: Vec<Option<&Tensor>> = vec![None; self.nodes.len()];
        for (id, t) in &bindings.entries {
            bound[id.0] = Some(t);
        }
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf => {
                    let t = bound[i].ok_or_else(|| {
                        StadvError::invalid(format!("leaf node {} not bound", i))
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(StadvError::ShapeMismatch {
                            primitive: "leaf binding",
                            lhs: node.shape.clone(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    t.clone()
                }
                Op::Constant(t) => t.clone(),
                Op::Add(a, b) => elementwise(&vals[a.0], &vals[b.0], |x, y| x + y),
                Op::Sub(a, b) => elementwise(&vals[a.0], &vals[b.0], |x, y| x - y),
                Op::Mul(a, b) => elementwise(&vals[a.0], &vals[b.0], |x, y| x * y),
                Op::MatMul(a, b) => matmul(&vals[a.0], &vals[b.0]),
                Op::Relu(a) => vals[a.0].map(|x| if x > 0.0 { x } else { 0.0 }),
                Op::Sigmoid(a) => vals[a.0].map(sigmoid),
                Op::Tanh(a) => vals[a.0].map(f64::tanh),
                Op::Abs(a) => vals[a.0].map(f64::abs),
                Op::Square(a) => vals[a.0].map(|x| x * x),
                Op::Sqrt(a) => vals[a.0].map(f64::sqrt),
                Op::SumAll(a) => Tensor::scalar(vals[a.0].data().iter().sum()),
                Op::MeanAll(a) => {
                    let t = &vals[a.0];
                    Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64)
                }
                Op::SumAxis0(a) => reduce_axis0(&vals[a.0], false),
                Op::MeanAxis0(a) => reduce_axis0(&vals[a.0], true),
                Op::Broadcast(a) => tile_to(&vals[a.0], &node.shape),
                Op::SliceAxis0(a, start, end) => slice_rows(&vals[a.0], *start, *end),
                Op::ConcatAxis0(parts) => {
                    let mut data = Vec::new();
                    for p in parts {
                        data.extend_from_slice(vals[p.0].data());
                    }
                    Tensor::new(node.shape.clone(), data).unwrap()
                }
                Op::MaskedMul(a, mask) => vals[a.0].zip_map(mask, |x, m| x * m).unwrap(),
            };
            if !v.all_finite() {
                return Err(StadvError::NonFinite(format!(
                    "forward output of {} (node {})",
                    node.op.name(),
                    i
                )));
            }
            vals.push(v);
        }
        Ok(Values { vals })
    }

    /// Gradient of the scalar `loss` node with respect to every leaf.
    /// Leaves the loss never touched get zero gradients.
    pub fn backward(&self, values: &Values, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(StadvError::invalid(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::filled(&self.nodes[loss.0].shape, 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            // NaN/Inf in an adjoint means a downstream formula blew up.
            if !g.all_finite() {
                return Err(StadvError::NonFinite(format!(
                    "gradient of {} (node {})",
                    self.nodes[i].op.name(),
                    i
                )));
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Constant(_) => {
                    if matches!(self.nodes[i].op, Op::Leaf) {
                        adj[i] = Some(g); // keep leaf gradient for the result
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, reduce_to_suffix(&g, &self.nodes[a.0].shape));
                    accumulate(&mut adj, *b, reduce_to_suffix(&g, &self.nodes[b.0].shape));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, reduce_to_suffix(&g, &self.nodes[a.0].shape));
                    let neg = g.map(|x| -x);
                    accumulate(&mut adj, *b, reduce_to_suffix(&neg, &self.nodes[b.0].shape));
                }
                Op::Mul(a, b) => {
                    let da = elementwise(&g, values.get(*b), |x, y| x * y);
                    let db = elementwise(&g, values.get(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, reduce_to_suffix(&da, &self.nodes[a.0].shape));
                    accumulate(&mut adj, *b, reduce_to_suffix(&db, &self.nodes[b.0].shape));
                }
                Op::MatMul(a, b) => {
                    let (da, db) = matmul_backward(values.get(*a), values.get(*b), &g);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Relu(a) => {
                    // Subgradient 0 at exactly 0.
                    let da = values
                        .get(*a)
                        .zip_map(&g, |x, gg| if x > 0.0 { gg } else { 0.0 })
                        .unwrap();
                    accumulate(&mut adj, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = values
                        .get(NodeId(i))
                        .zip_map(&g, |s, gg| gg * s * (1.0 - s))
                        .unwrap();
                    accumulate(&mut adj, *a, da);
                }
                Op::Tanh(a) => {
                    let da = values
                        .get(NodeId(i))
                        .zip_map(&g, |t, gg| gg * (1.0 - t * t))
                        .unwrap();
                    accumulate(&mut adj, *a, da);
                }
                Op::Abs(a) => {
                    // Subgradient 0 at exactly 0, matching relu's convention.
                    let da = values
                        .get(*a)
                        .zip_map(&g, |x, gg| {
                            if x > 0.0 {
                                gg
                            } else if x < 0.0 {
                                -gg
                            } else {
                                0.0
                            }
                        })
                        .unwrap();
                    accumulate(&mut adj, *a, da);
                }
                Op::Square(a) => {
                    let da = values.get(*a).zip_map(&g, |x, gg| 2.0 * x * gg).unwrap();
                    accumulate(&mut adj, *a, da);
                }
                Op::Sqrt(a) => {
                    let da = values
                        .get(NodeId(i))
                        .zip_map(&g, |s, gg| gg * 0.5 / s)
                        .unwrap();
                    accumulate(&mut adj, *a, da);
                }
                Op::SumAll(a) => {
                    let da = Tensor::filled(&self.nodes[a.0].shape, g.data()[0]);
                    accumulate(&mut adj, *a, da);
                }
                Op::MeanAll(a) => {
                    let n: usize = self.nodes[a.0].shape.iter().product();
                    let da = Tensor::filled(&self.nodes[a.0].shape, g.data()[0] / n as f64);
                    accumulate(&mut adj, *a, da);
                }
                Op::SumAxis0(a) => {
                    accumulate(&mut adj, *a, tile_to(&g, &self.nodes[a.0].shape));
                }
                Op::MeanAxis0(a) => {
                    let d0 = self.nodes[a.0].shape[0] as f64;
                    let scaled = g.map(|x| x / d0);
                    accumulate(&mut adj, *a, tile_to(&scaled, &self.nodes[a.0].shape));
                }
                Op::Broadcast(a) => {
                    accumulate(&mut adj, *a, reduce_to_suffix(&g, &self.nodes[a.0].shape));
                }
                Op::SliceAxis0(a, start, _) => {
                    let src = &self.nodes[a.0].shape;
                    let row: usize = src[1..].iter().product::<usize>().max(1);
                    let mut da = Tensor::zeros(src);
                    let off = start * row;
                    da.data_mut()[off..off + g.numel()].copy_from_slice(g.data());
                    accumulate(&mut adj, *a, da);
                }
                Op::ConcatAxis0(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].shape.iter().product::<usize>();
                        let part = Tensor::new(
                            self.nodes[p.0].shape.clone(),
                            g.data()[off..off + len].to_vec(),
                        )
                        .unwrap();
                        accumulate(&mut adj, *p, part);
                        off += len;
                    }
                }
                Op::MaskedMul(a, mask) => {
                    let da = g.zip_map(mask, |gg, m| gg * m).unwrap();
                    accumulate(&mut adj, *a, da);
                }
            }
        }

        // Unvisited leaves get zeros rather than an error.
        for &leaf in &self.leaves {
            if adj[leaf.0].is_none() {
                adj[leaf.0] = Some(Tensor::zeros(&self.nodes[leaf.0].shape));
            }
        }
        Ok(Gradients { grads: adj })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, grad: Tensor) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_scaled(&grad, 1.0),
        slot @ None => *slot = Some(grad),
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

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let k = b.shape()[0];
    let m = b.shape()[1];
    let rows = a.numel() / k;
    let mut out = vec![0.0; rows * m];
    let ad = a.data();
    let bd = b.data();
    for r in 0..rows {
        let arow = &ad[r * k..(r + 1) * k];
        let orow = &mut out[r * m..(r + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    let mut shape = a.shape()[..a.rank() - 1].to_vec();
    shape.push(m);
    Tensor::new(shape, out).unwrap()
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let k = b.shape()[0];
    let m = b.shape()[1];
    let rows = a.numel() / k;
    let ad = a.data();
    let bd = b.data();
    let gd = g.data();
    // dA = g . B^T
    let mut da = vec![0.0; rows * k];
    for r in 0..rows {
        let grow = &gd[r * m..(r + 1) * m];
        let darow = &mut da[r * k..(r + 1) * k];
        for kk in 0..k {
            let brow = &bd[kk * m..(kk + 1) * m];
            let mut acc = 0.0;
            for c in 0..m {
                acc += grow[c] * brow[c];
            }
            darow[kk] = acc;
        }
    }
    // dB = A^T . g
    let mut db = vec![0.0; k * m];
    for r in 0..rows {
        let arow = &ad[r * k..(r + 1) * k];
        let grow = &gd[r * m..(r + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[kk * m..(kk + 1) * m];
            for (d, &gv) in dbrow.iter_mut().zip(grow.iter()) {
                *d += av * gv;
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), da).unwrap(),
        Tensor::new(b.shape().to_vec(), db).unwrap(),
    )
}

fn reduce_axis0(t: &Tensor, mean: bool) -> Tensor {
    let d0 = t.shape()[0];
    let rest: usize = t.shape()[1..].iter().product::<usize>().max(1);
    let mut out = vec![0.0; rest];
    for r in 0..d0 {
        let row = &t.data()[r * rest..(r + 1) * rest];
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o += v;
        }
    }
    if mean {
        for o in &mut out {
            *o /= d0 as f64;
        }
    }
    Tensor::new(t.shape()[1..].to_vec(), out).unwrap()
}

fn tile_to(t: &Tensor, target: &[usize]) -> Tensor {
    let total: usize = target.iter().product();
    let s = t.numel().max(1);
    let data = (0..total).map(|i| t.data()[i % s]).collect();
    Tensor::new(target.to_vec(), data).unwrap()
}

fn slice_rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let row: usize = t.shape()[1..].iter().product::<usize>().max(1);
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * row..end * row].to_vec()).unwrap()
}

/// Activation nonlinearity shared by the forecaster and the proof-form model.
/// All three choices are 1-Lipschitz, which the robustness bound relies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    pub fn scalar(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Lipschitz constant used as the bound's activation parameter.
    pub fn lipschitz(self) -> f64 {
        1.0
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            other => Err(StadvError::invalid(format!(
                "unknown activation {:?} (expected relu, sigmoid, or tanh)",
                other
            ))),
        }
    }
}

/// A scalar-valued differentiable function of one tensor argument.
pub trait ScalarFn {
    fn value(&self, x: &Tensor) -> Result<f64>;
    fn gradient(&self, x: &Tensor) -> Result<Tensor>;
}

/// Adapter exposing one tape leaf as a [`ScalarFn`] with the remaining
/// leaves held fixed.
pub struct TapeScalarFn<'a> {
    pub tape: &'a Tape,
    pub input: NodeId,
    pub loss: NodeId,
    pub fixed: Vec<(NodeId, Tensor)>,
}

impl TapeScalarFn<'_> {
    fn bindings(&self, x: &Tensor) -> Bindings {
        let mut b = Bindings::new();
        for (id, t) in &self.fixed {
            b.set(*id, t.clone());
        }
        b.set(self.input, x.clone());
        b
    }
}

impl ScalarFn for TapeScalarFn<'_> {
    fn value(&self, x: &Tensor) -> Result<f64> {
        let vals = self.tape.forward(&self.bindings(x))?;
        Ok(vals.scalar(self.loss))
    }

    fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        let vals = self.tape.forward(&self.bindings(x))?;
        let grads = self.tape.backward(&vals, self.loss)?;
        Ok(grads.get(self.input).clone())
    }
}

/// Relative disagreement between one-sided difference quotients above which a
/// coordinate is treated as sitting on an activation kink and excluded.
const KINK_TOLERANCE: f64 = 1e-3;

/// Compare the analytic gradient of `f` against central finite differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - central| / max(1, |analytic|)`. Coordinates where the forward
/// and backward difference quotients disagree (a nondifferentiable kink inside
/// the `+-step` interval) are excluded from the maximum.
pub fn grad_check<F: ScalarFn + ?Sized>(f: &F, point: &Tensor, step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(StadvError::invalid("grad_check step must be positive"));
    }
    let analytic = f.gradient(point)?;
    let f0 = f.value(point)?;
    if !f0.is_finite() {
        return Err(StadvError::NonFinite("grad_check function value".into()));
    }
    let mut max_err = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f.value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f.value(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(StadvError::NonFinite("grad_check function value".into()));
        }
        let dplus = (fp - f0) / step;
        let dminus = (f0 - fm) / step;
        if (dplus - dminus).abs() > KINK_TOLERANCE * dplus.abs().max(dminus.abs()).max(1.0) {
            continue; // kink inside the probe interval
        }
        let central = (fp - fm) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - central).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn scalar_square_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1]);
        let y = tape.mul(x, x).unwrap();
        let vals = tape
            .forward(&Bindings::new().bind(x, Tensor::scalar(2.0)))
            .unwrap();
        assert_eq!(vals.scalar(y), 4.0);
    }

    #[test]
    fn relu_shifted_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2]);
        let c = tape.constant(Tensor::new(vec![2], vec![1.5, 1.5]).unwrap());
        let d = tape.sub(x, c).unwrap();
        let y = tape.relu(d);
        let vals = tape
            .forward(&Bindings::new().bind(x, Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()))
            .unwrap();
        assert_eq!(vals.get(y).data(), &[0.0, 0.5]);
    }

    /// Independent naive triple-loop matmul used as the oracle.
    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let m = b.shape()[1];
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a.get(&[i, l]) * b.get(&[l, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    #[test]
    fn matmul_chain_matches_naive_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, &[3, 3]);
            let b = rand_tensor(&mut rng, &[3, 3]);
            let c = rand_tensor(&mut rng, &[3, 3]);
            let mut tape = Tape::new();
            let na = tape.constant(a.clone());
            let nb = tape.constant(b.clone());
            let nc = tape.constant(c.clone());
            let ab = tape.matmul(na, nb).unwrap();
            let abc = tape.matmul(ab, nc).unwrap();
            let vals = tape.forward(&Bindings::new()).unwrap();
            let expected = naive_matmul(&naive_matmul(&a, &b), &c);
            for (got, want) in vals.get(abc).data().iter().zip(expected.data()) {
                assert!((got - want).abs() < 1e-12, "{} vs {}", got, want);
            }
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1]);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        let vals = tape
            .forward(&Bindings::new().bind(x, Tensor::scalar(3.0)))
            .unwrap();
        let grads = tape.backward(&vals, loss).unwrap();
        assert_eq!(grads.get(x).data(), &[6.0]);
    }

    #[test]
    fn relu_dead_region_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1]);
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        for (input, expected) in [(-1.0, 0.0), (0.0, 0.0), (2.0, 1.0)] {
            let vals = tape
                .forward(&Bindings::new().bind(x, Tensor::scalar(input)))
                .unwrap();
            let grads = tape.backward(&vals, loss).unwrap();
            assert_eq!(grads.get(x).data(), &[expected], "at x={}", input);
        }
    }

    #[test]
    fn unvisited_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2]);
        let unused = tape.leaf(&[3]);
        let loss = tape.sum_all(x);
        let vals = tape
            .forward(
                &Bindings::new()
                    .bind(x, Tensor::zeros(&[2]))
                    .bind(unused, Tensor::zeros(&[3])),
            )
            .unwrap();
        let grads = tape.backward(&vals, loss).unwrap();
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2]);
        let y = tape.relu(x);
        let vals = tape
            .forward(&Bindings::new().bind(x, Tensor::zeros(&[2])))
            .unwrap();
        assert!(tape.backward(&vals, y).is_err());
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[2, 3]);
        let b = tape.leaf(&[4]);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{}", msg);
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{}", msg);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.leaf(&[4, 3]);
        let w = tape.constant(rand_tensor(&mut rng, &[3, 2]));
        let h = tape.matmul(x, w).unwrap();
        let s = tape.sigmoid(h);
        let out = tape.mean_all(s);
        let xv = rand_tensor(&mut rng, &[4, 3]);
        let v1 = tape.forward(&Bindings::new().bind(x, xv.clone())).unwrap();
        let v2 = tape.forward(&Bindings::new().bind(x, xv)).unwrap();
        assert_eq!(v1.get(out).data(), v2.get(out).data());
    }

    #[test]
    fn broadcast_add_bias_and_reduce_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 3]);
        let bias = tape.leaf(&[3]);
        let y = tape.add(x, bias).unwrap();
        let loss = tape.sum_all(y);
        let vals = tape
            .forward(
                &Bindings::new()
                    .bind(x, Tensor::zeros(&[2, 3]))
                    .bind(bias, Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()),
            )
            .unwrap();
        assert_eq!(vals.get(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let grads = tape.backward(&vals, loss).unwrap();
        assert_eq!(grads.get(bias).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn slice_concat_round_trip_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[4, 2]);
        let top = tape.slice_axis0(x, 0, 1).unwrap();
        let rest = tape.slice_axis0(x, 1, 4).unwrap();
        let glued = tape.concat_axis0(&[top, rest]).unwrap();
        let sq = tape.square(glued);
        let loss = tape.sum_all(sq);
        let xv = Tensor::from_fn(&[4, 2], |i| (i[0] * 2 + i[1]) as f64);
        let vals = tape.forward(&Bindings::new().bind(x, xv.clone())).unwrap();
        assert_eq!(vals.get(glued).data(), xv.data());
        let grads = tape.backward(&vals, loss).unwrap();
        for (g, v) in grads.get(x).data().iter().zip(xv.data()) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_mul_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[4]);
        let mask = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = tape.masked_mul(x, mask).unwrap();
        let loss = tape.sum_all(y);
        let vals = tape
            .forward(&Bindings::new().bind(x, Tensor::filled(&[4], 2.0)))
            .unwrap();
        let grads = tape.backward(&vals, loss).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    struct SumOfSquares;
    impl ScalarFn for SumOfSquares {
        fn value(&self, x: &Tensor) -> crate::error::Result<f64> {
            Ok(x.data().iter().map(|v| v * v).sum())
        }
        fn gradient(&self, x: &Tensor) -> crate::error::Result<Tensor> {
            Ok(x.map(|v| 2.0 * v))
        }
    }

    #[test]
    fn grad_check_exact_for_quadratics() {
        let point = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(&SumOfSquares, &point, 1e-5).unwrap();
        assert!(err < 1e-8, "err={}", err);
    }

    #[test]
    fn grad_check_excludes_relu_kink() {
        // f(x) = sum(relu(x)); at x=0 the one-sided slopes differ, so the
        // kink coordinate must be skipped rather than reported as an error.
        struct ReluSum;
        impl ScalarFn for ReluSum {
            fn value(&self, x: &Tensor) -> crate::error::Result<f64> {
                Ok(x.data().iter().map(|v| v.max(0.0)).sum())
            }
            fn gradient(&self, x: &Tensor) -> crate::error::Result<Tensor> {
                Ok(x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
            }
        }
        let point = Tensor::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap();
        let err = grad_check(&ReluSum, &point, 1e-5).unwrap();
        assert!(err < 1e-8, "err={}", err);
    }

    #[test]
    fn grad_check_rejects_nonpositive_step() {
        let point = Tensor::scalar(1.0);
        assert!(grad_check(&SumOfSquares, &point, 0.0).is_err());
    }

    /// Central-difference sweep across every primitive, 100 random seeds.
    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.leaf(&[3, 4]);
            let w = tape.constant(rand_tensor(&mut rng, &[4, 3]));
            let bias = tape.constant(rand_tensor(&mut rng, &[3]));
            let mm = tape.matmul(x, w).unwrap();
            let shifted = tape.add(mm, bias).unwrap();
            let s = tape.sigmoid(shifted);
            let t = tape.tanh(mm);
            let r = tape.relu(shifted);
            let prod = tape.mul(s, t).unwrap();
            let diff = tape.sub(prod, r).unwrap();
            let sq = tape.square(diff);
            let a = tape.abs(diff);
            let mix = tape.add(sq, a).unwrap();
            let top = tape.slice_axis0(mix, 0, 1).unwrap();
            let bottom = tape.slice_axis0(mix, 1, 3).unwrap();
            let glued = tape.concat_axis0(&[top, bottom]).unwrap();
            let mask = Tensor::from_fn(&[3, 3], |i| ((i[0] + i[1]) % 2) as f64);
            let masked = tape.masked_mul(glued, mask).unwrap();
            let col = tape.mean_axis0(masked).unwrap();
            let means = tape.mean_all(col);
            let sums = tape.sum_all(masked);
            let loss = tape.add(means, sums).unwrap();

            let f = TapeScalarFn {
                tape: &tape,
                input: x,
                loss,
                fixed: vec![],
            };
            let point = rand_tensor(&mut rng, &[3, 4]);
            let err = grad_check(&f, &point, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {}: relative error {}", seed, err);
        }
    }

    #[test]
    fn sqrt_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.leaf(&[5]);
            let sq = tape.square(x); // keep the argument positive
            let one = tape.constant(Tensor::filled(&[5], 1.0));
            let pos = tape.add(sq, one).unwrap();
            let root = tape.sqrt(pos);
            let loss = tape.sum_all(root);
            let f = TapeScalarFn {
                tape: &tape,
                input: x,
                loss,
                fixed: vec![],
            };
            let point = Tensor::from_fn(&[5], |_| rng.random_range(-2.0..2.0));
            let err = grad_check(&f, &point, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {}: {}", seed, err);
        }
    }
}
