//! Differentiable compute graphs with reverse-mode gradients.
//!
//! A [`ComputeGraph`] is an immutable, topologically ordered list of operation
//! records over leaf tensors. Leaves are bound to values at evaluation time,
//! so the same graph can be re-evaluated at many weight points — which is
//! exactly what the sharpness measures do. Gradients are exact reverse-mode;
//! [`ComputeGraph::finite_difference_gradient`] provides the independent
//! central-difference route used to cross-check them.
//!
//! Supported operations: matmul, broadcast add, relu, row softmax, log,
//! negate, sum, mean, scale-by-constant, square, l2-norm,
//! cross-entropy-with-labels, and KL divergence.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Probability floor used inside KL divergence so log(0) never occurs.
pub const KL_PROB_FLOOR: f64 = 1e-12;

/// Identifier of a node within one graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Leaf { label: String },
    MatMul { lhs: NodeId, rhs: NodeId },
    AddBroadcast { lhs: NodeId, rhs: NodeId },
    Relu { input: NodeId },
    Softmax { input: NodeId },
    Log { input: NodeId },
    Negate { input: NodeId },
    Sum { input: NodeId },
    Mean { input: NodeId },
    Scale { input: NodeId, factor: f64 },
    Square { input: NodeId },
    L2Norm { input: NodeId },
    CrossEntropy { logits: NodeId, labels: NodeId },
    KlDivergence { p: NodeId, q: NodeId },
}

impl Op {
    fn kind_name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddBroadcast { .. } => "add-broadcast",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::Log { .. } => "log",
            Op::Negate { .. } => "negate",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Scale { .. } => "scale",
            Op::Square { .. } => "square",
            Op::L2Norm { .. } => "l2-norm",
            Op::CrossEntropy { .. } => "cross-entropy-with-labels",
            Op::KlDivergence { .. } => "kl-divergence",
        }
    }

}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node {node} ({kind}): incompatible input shapes: {detail}")]
    ShapeMismatch {
        node: usize,
        kind: &'static str,
        detail: String,
    },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("leaf '{label}' (node {node}): missing binding")]
    MissingBinding { node: usize, label: String },
    #[error("leaf '{label}' (node {node}): bound shape {got:?} does not match declared {expected:?}")]
    BindingShape {
        node: usize,
        label: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("node {node} ({kind}): non-finite value produced during evaluation")]
    NonFinite { node: usize, kind: &'static str },
    #[error("node {node} (cross-entropy-with-labels): label {value} at row {row} is not an integer in [0, {classes})")]
    InvalidLabel {
        node: usize,
        row: usize,
        value: f64,
        classes: usize,
    },
    #[error("gradient requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("gradient target {node} is not a leaf of this graph")]
    NotALeaf { node: usize },
    #[error("finite differences require a positive step size, got {0}")]
    NonPositiveStep(f64),
    #[error("scale factor must be finite, got {0}")]
    NonFiniteFactor(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Leaf bindings for one evaluation: node id to value.
pub type Bindings = BTreeMap<NodeId, Tensor>;

/// Gradients of the scalar output with respect to requested leaves.
///
/// Keys are exactly the requested leaf ids; each tensor has the leaf's shape.
pub type GradientMap = BTreeMap<NodeId, Tensor>;

/// Incrementally builds a graph; every operation is shape-checked on insertion.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> Result<&[usize], GraphError> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or(GraphError::UnknownNode(id.0))
    }

    fn mismatch(&self, kind: &'static str, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node: self.nodes.len(),
            kind,
            detail,
        }
    }

    /// Declare a leaf tensor of the given shape. The label shows up in
    /// binding and evaluation errors.
    pub fn leaf(&mut self, shape: &[usize], label: &str) -> NodeId {
        self.push(
            Op::Leaf {
                label: label.to_string(),
            },
            shape.to_vec(),
        )
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, GraphError> {
        let a = self.shape_of(lhs)?.to_vec();
        let b = self.shape_of(rhs)?.to_vec();
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(self.mismatch("matmul", format!("{a:?} x {b:?}")));
        }
        let shape = vec![a[0], b[1]];
        Ok(self.push(Op::MatMul { lhs, rhs }, shape))
    }

    /// Elementwise add; a `[n]` right operand broadcasts over the rows of an
    /// `[m,n]` left operand.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, GraphError> {
        let a = self.shape_of(lhs)?.to_vec();
        let b = self.shape_of(rhs)?.to_vec();
        let ok = a == b || (a.len() == 2 && b.len() == 1 && a[1] == b[0]);
        if !ok {
            return Err(self.mismatch("add-broadcast", format!("{a:?} + {b:?}")));
        }
        Ok(self.push(Op::AddBroadcast { lhs, rhs }, a))
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::Relu { input }, shape))
    }

    /// Row-wise softmax of a `[n]` vector or `[m,n]` matrix.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape_of(input)?.to_vec();
        if shape.is_empty() || shape.len() > 2 {
            return Err(self.mismatch("softmax", format!("{shape:?}")));
        }
        Ok(self.push(Op::Softmax { input }, shape))
    }

    /// Elementwise natural log. Inputs must be strictly positive at
    /// evaluation time or the non-finite check trips.
    pub fn log(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::Log { input }, shape))
    }

    pub fn negate(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::Negate { input }, shape))
    }

    /// Sum of all entries, yielding a `[1]` scalar.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.shape_of(input)?;
        Ok(self.push(Op::Sum { input }, vec![1]))
    }

    /// Mean of all entries, yielding a `[1]` scalar.
    pub fn mean(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.shape_of(input)?;
        Ok(self.push(Op::Mean { input }, vec![1]))
    }

    /// Multiply every entry by a fixed constant.
    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        if !factor.is_finite() {
            return Err(GraphError::NonFiniteFactor(factor));
        }
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::Scale { input, factor }, shape))
    }

    pub fn square(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        let shape = self.shape_of(input)?.to_vec();
        Ok(self.push(Op::Square { input }, shape))
    }

    /// Euclidean norm of all entries, yielding a `[1]` scalar.
    pub fn l2_norm(&mut self, input: NodeId) -> Result<NodeId, GraphError> {
        self.shape_of(input)?;
        Ok(self.push(Op::L2Norm { input }, vec![1]))
    }

    /// Mean cross-entropy of `[b,k]` logits against `[b]` integer class
    /// labels, yielding a `[1]` scalar. Log-softmax is fused and
    /// max-subtracted. Labels are index data: they carry no gradient.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> Result<NodeId, GraphError> {
        let a = self.shape_of(logits)?.to_vec();
        let b = self.shape_of(labels)?.to_vec();
        if a.len() != 2 || a[1] < 2 || b.len() != 1 || b[0] != a[0] {
            return Err(self.mismatch(
                "cross-entropy-with-labels",
                format!("logits {a:?}, labels {b:?}"),
            ));
        }
        Ok(self.push(Op::CrossEntropy { logits, labels }, vec![1]))
    }

    /// Row-averaged KL divergence `KL(p || q)` between probability rows,
    /// yielding a `[1]` scalar. Probabilities are floored at
    /// [`KL_PROB_FLOOR`] inside the logs.
    pub fn kl_divergence(&mut self, p: NodeId, q: NodeId) -> Result<NodeId, GraphError> {
        let a = self.shape_of(p)?.to_vec();
        let b = self.shape_of(q)?.to_vec();
        if a != b || a.is_empty() || a.len() > 2 {
            return Err(self.mismatch("kl-divergence", format!("{a:?} vs {b:?}")));
        }
        Ok(self.push(Op::KlDivergence { p, q }, vec![1]))
    }

    /// Freeze the graph with `output` as its designated output node.
    pub fn build(self, output: NodeId) -> Result<ComputeGraph, GraphError> {
        if output.0 >= self.nodes.len() {
            return Err(GraphError::UnknownNode(output.0));
        }
        Ok(ComputeGraph {
            nodes: self.nodes,
            output,
        })
    }
}

/// An immutable differentiable expression over leaf tensors.
///
/// Safe to share across threads; every evaluation owns a private workspace.
#[derive(Debug, Clone)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    output: NodeId,
}

impl ComputeGraph {
    pub fn output_id(&self) -> NodeId {
        self.output
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output.0].shape
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Declared shape of a node.
    pub fn node_shape(&self, id: NodeId) -> Option<&[usize]> {
        self.nodes.get(id.0).map(|n| n.shape.as_slice())
    }

    /// Ids of all leaf nodes in declaration order.
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { .. }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn is_leaf(&self, id: NodeId) -> bool {
        matches!(
            self.nodes.get(id.0).map(|n| &n.op),
            Some(Op::Leaf { .. })
        )
    }

    fn leaf_label(&self, id: NodeId) -> &str {
        match &self.nodes[id.0].op {
            Op::Leaf { label } => label,
            _ => "",
        }
    }

    /// Evaluate the designated output for the given leaf bindings.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Tensor, GraphError> {
        let values = self.evaluate_all(bindings)?;
        Ok(values.into_iter().nth(self.output.0).expect("output exists"))
    }

    /// Evaluate every node, returning all values in node order.
    pub fn evaluate_all(&self, bindings: &Bindings) -> Result<Vec<Tensor>, GraphError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i);
            let value = match &node.op {
                Op::Leaf { label } => {
                    let bound = bindings.get(&id).ok_or_else(|| GraphError::MissingBinding {
                        node: i,
                        label: label.clone(),
                    })?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(GraphError::BindingShape {
                            node: i,
                            label: label.clone(),
                            expected: node.shape.clone(),
                            got: bound.shape().to_vec(),
                        });
                    }
                    bound.clone()
                }
                Op::MatMul { lhs, rhs } => matmul_forward(&values[lhs.0], &values[rhs.0]),
                Op::AddBroadcast { lhs, rhs } => add_forward(&values[lhs.0], &values[rhs.0]),
                Op::Relu { input } => map_forward(&values[input.0], |x| x.max(0.0)),
                Op::Softmax { input } => softmax_forward(&values[input.0]),
                Op::Log { input } => map_forward(&values[input.0], f64::ln),
                Op::Negate { input } => map_forward(&values[input.0], |x| -x),
                Op::Sum { input } => {
                    Tensor::from_parts_unchecked(vec![1], vec![values[input.0].data().iter().sum()])
                }
                Op::Mean { input } => {
                    let v = &values[input.0];
                    let m = v.data().iter().sum::<f64>() / v.numel() as f64;
                    Tensor::from_parts_unchecked(vec![1], vec![m])
                }
                Op::Scale { input, factor } => map_forward(&values[input.0], |x| x * factor),
                Op::Square { input } => map_forward(&values[input.0], |x| x * x),
                Op::L2Norm { input } => {
                    let ss: f64 = values[input.0].data().iter().map(|x| x * x).sum();
                    Tensor::from_parts_unchecked(vec![1], vec![ss.sqrt()])
                }
                Op::CrossEntropy { logits, labels } => {
                    let classes = self.nodes[logits.0].shape[1];
                    let labels_t = &values[labels.0];
                    check_labels(labels_t, classes, i)?;
                    cross_entropy_forward(&values[logits.0], labels_t)
                }
                Op::KlDivergence { p, q } => kl_forward(&values[p.0], &values[q.0]),
            };
            if value.data().iter().any(|v| !v.is_finite()) {
                return Err(GraphError::NonFinite {
                    node: i,
                    kind: node.op.kind_name(),
                });
            }
            values.push(value);
        }
        Ok(values)
    }

    /// Exact reverse-mode gradients of the scalar output w.r.t. `wrt` leaves.
    pub fn gradient(&self, bindings: &Bindings, wrt: &[NodeId]) -> Result<GradientMap, GraphError> {
        let out_shape = self.output_shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarOutput {
                shape: out_shape.to_vec(),
            });
        }
        for &id in wrt {
            if !self.is_leaf(id) {
                return Err(GraphError::NotALeaf { node: id.0 });
            }
        }

        let values = self.evaluate_all(bindings)?;
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoints[self.output.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = adjoints[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {
                    adjoints[i] = Some(grad);
                    continue;
                }
                Op::MatMul { lhs, rhs } => {
                    let (da, db) = matmul_backward(&grad, &values[lhs.0], &values[rhs.0]);
                    accumulate(&mut adjoints, *lhs, da);
                    accumulate(&mut adjoints, *rhs, db);
                }
                Op::AddBroadcast { lhs, rhs } => {
                    accumulate(&mut adjoints, *lhs, grad.clone());
                    let b_shape = &self.nodes[rhs.0].shape;
                    if b_shape.as_slice() == self.nodes[lhs.0].shape.as_slice() {
                        accumulate(&mut adjoints, *rhs, grad);
                    } else {
                        // [m,n] + [n]: fold the row axis back into the vector.
                        let n = b_shape[0];
                        let mut db = vec![0.0; n];
                        for (j, g) in grad.iter().enumerate() {
                            db[j % n] += g;
                        }
                        accumulate(&mut adjoints, *rhs, db);
                    }
                }
                Op::Relu { input } => {
                    let x = values[input.0].data();
                    let dx = grad
                        .iter()
                        .zip(x)
                        .map(|(g, &xv)| if xv > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut adjoints, *input, dx);
                }
                Op::Softmax { input } => {
                    let dx = softmax_backward(&grad, &values[i]);
                    accumulate(&mut adjoints, *input, dx);
                }
                Op::Log { input } => {
                    let x = values[input.0].data();
                    let dx = grad.iter().zip(x).map(|(g, &xv)| g / xv).collect();
                    accumulate(&mut adjoints, *input, dx);
                }
                Op::Negate { input } => {
                    accumulate(&mut adjoints, *input, grad.iter().map(|g| -g).collect());
                }
                Op::Sum { input } => {
                    let n = values[input.0].numel();
                    accumulate(&mut adjoints, *input, vec![grad[0]; n]);
                }
                Op::Mean { input } => {
                    let n = values[input.0].numel();
                    accumulate(&mut adjoints, *input, vec![grad[0] / n as f64; n]);
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut adjoints, *input, grad.iter().map(|g| g * factor).collect());
                }
                Op::Square { input } => {
                    let x = values[input.0].data();
                    let dx = grad.iter().zip(x).map(|(g, &xv)| 2.0 * xv * g).collect();
                    accumulate(&mut adjoints, *input, dx);
                }
                Op::L2Norm { input } => {
                    let x = values[input.0].data();
                    let norm = values[i].data()[0];
                    let dx = if norm == 0.0 {
                        vec![0.0; x.len()]
                    } else {
                        x.iter().map(|&xv| grad[0] * xv / norm).collect()
                    };
                    accumulate(&mut adjoints, *input, dx);
                }
                Op::CrossEntropy { logits, labels } => {
                    let dx = cross_entropy_backward(grad[0], &values[logits.0], &values[labels.0]);
                    accumulate(&mut adjoints, *logits, dx);
                    // Labels are indices: no gradient flows to them.
                }
                Op::KlDivergence { p, q } => {
                    let (dp, dq) = kl_backward(grad[0], &values[p.0], &values[q.0]);
                    accumulate(&mut adjoints, *p, dp);
                    accumulate(&mut adjoints, *q, dq);
                }
            }
        }

        let mut out = GradientMap::new();
        for &id in wrt {
            let shape = self.nodes[id.0].shape.clone();
            let data = match adjoints[id.0].take() {
                Some(g) => g,
                None => vec![0.0; shape.iter().product()],
            };
            out.insert(id, Tensor::from_parts_unchecked(shape, data));
        }
        Ok(out)
    }

    /// Central-difference gradients `(L(w+h) - L(w-h)) / 2h` per coordinate.
    ///
    /// The independent numerical route used to cross-check [`Self::gradient`].
    pub fn finite_difference_gradient(
        &self,
        bindings: &Bindings,
        wrt: &[NodeId],
        h: f64,
    ) -> Result<GradientMap, GraphError> {
        if h <= 0.0 {
            return Err(GraphError::NonPositiveStep(h));
        }
        let out_shape = self.output_shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(GraphError::NonScalarOutput {
                shape: out_shape.to_vec(),
            });
        }
        for &id in wrt {
            if !self.is_leaf(id) {
                return Err(GraphError::NotALeaf { node: id.0 });
            }
            if !bindings.contains_key(&id) {
                return Err(GraphError::MissingBinding {
                    node: id.0,
                    label: self.leaf_label(id).to_string(),
                });
            }
        }

        let mut work = bindings.clone();
        let mut out = GradientMap::new();
        for &id in wrt {
            let base = bindings[&id].clone();
            let n = base.numel();
            let mut grad = vec![0.0; n];
            for k in 0..n {
                for (sign, slot) in [(1.0, 0usize), (-1.0, 1usize)] {
                    let mut data = base.data().to_vec();
                    data[k] += sign * h;
                    work.insert(
                        id,
                        Tensor::from_parts_unchecked(base.shape().to_vec(), data),
                    );
                    let value = self.evaluate(&work)?.data()[0];
                    if slot == 0 {
                        grad[k] = value;
                    } else {
                        grad[k] = (grad[k] - value) / (2.0 * h);
                    }
                }
            }
            work.insert(id, base.clone());
            out.insert(
                id,
                Tensor::from_parts_unchecked(base.shape().to_vec(), grad),
            );
        }
        Ok(out)
    }
}

fn accumulate(adjoints: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    match &mut adjoints[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn map_forward(input: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts_unchecked(
        input.shape().to_vec(),
        input.data().iter().map(|&x| f(x)).collect(),
    )
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data()[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b.data()[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_parts_unchecked(vec![m, n], out)
}

fn matmul_backward(grad: &[f64], a: &Tensor, b: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    // dA = G B^T
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        for l in 0..k {
            let b_row = &b.data()[l * n..(l + 1) * n];
            let g_row = &grad[i * n..(i + 1) * n];
            da[i * k + l] = g_row.iter().zip(b_row).map(|(g, bv)| g * bv).sum();
        }
    }
    // dB = A^T G
    let mut db = vec![0.0; k * n];
    for l in 0..k {
        for i in 0..m {
            let av = a.data()[i * k + l];
            let g_row = &grad[i * n..(i + 1) * n];
            let db_row = &mut db[l * n..(l + 1) * n];
            for (d, g) in db_row.iter_mut().zip(g_row) {
                *d += av * g;
            }
        }
    }
    (da, db)
}

fn add_forward(a: &Tensor, b: &Tensor) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x + y)
            .collect();
        Tensor::from_parts_unchecked(a.shape().to_vec(), data)
    } else {
        let n = b.shape()[0];
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % n])
            .collect();
        Tensor::from_parts_unchecked(a.shape().to_vec(), data)
    }
}

fn softmax_rows(t: &Tensor) -> (usize, usize) {
    match t.shape().len() {
        1 => (1, t.shape()[0]),
        _ => (t.shape()[0], t.shape()[1]),
    }
}

fn softmax_forward(input: &Tensor) -> Tensor {
    let (rows, cols) = softmax_rows(input);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &input.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut denom = 0.0;
        for (o, &x) in out_row.iter_mut().zip(row) {
            *o = (x - max).exp();
            denom += *o;
        }
        for o in out_row.iter_mut() {
            *o /= denom;
        }
    }
    Tensor::from_parts_unchecked(input.shape().to_vec(), out)
}

fn softmax_backward(grad: &[f64], probs: &Tensor) -> Vec<f64> {
    let (rows, cols) = softmax_rows(probs);
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let p = &probs.data()[r * cols..(r + 1) * cols];
        let g = &grad[r * cols..(r + 1) * cols];
        let dot: f64 = p.iter().zip(g).map(|(pv, gv)| pv * gv).sum();
        let d = &mut dx[r * cols..(r + 1) * cols];
        for ((dv, &pv), &gv) in d.iter_mut().zip(p).zip(g) {
            *dv = pv * (gv - dot);
        }
    }
    dx
}

fn check_labels(labels: &Tensor, classes: usize, node: usize) -> Result<(), GraphError> {
    for (row, &value) in labels.data().iter().enumerate() {
        if value.fract() != 0.0 || value < 0.0 || value >= classes as f64 {
            return Err(GraphError::InvalidLabel {
                node,
                row,
                value,
                classes,
            });
        }
    }
    Ok(())
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_denom = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - max - log_denom;
    }
}

fn cross_entropy_forward(logits: &Tensor, labels: &Tensor) -> Tensor {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut lsm = vec![0.0; k];
    let mut total = 0.0;
    for i in 0..b {
        log_softmax_row(&logits.data()[i * k..(i + 1) * k], &mut lsm);
        total -= lsm[labels.data()[i] as usize];
    }
    Tensor::from_parts_unchecked(vec![1], vec![total / b as f64])
}

fn cross_entropy_backward(grad: f64, logits: &Tensor, labels: &Tensor) -> Vec<f64> {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut dx = vec![0.0; b * k];
    let scale = grad / b as f64;
    for i in 0..b {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let d = &mut dx[i * k..(i + 1) * k];
        for (j, (dv, &x)) in d.iter_mut().zip(row).enumerate() {
            let p = (x - max).exp() / denom;
            let indicator = if j == labels.data()[i] as usize { 1.0 } else { 0.0 };
            *dv = scale * (p - indicator);
        }
    }
    dx
}

fn kl_rows(t: &Tensor) -> (usize, usize) {
    softmax_rows(t)
}

fn kl_forward(p: &Tensor, q: &Tensor) -> Tensor {
    let (rows, cols) = kl_rows(p);
    let mut total = 0.0;
    for r in 0..rows {
        let pr = &p.data()[r * cols..(r + 1) * cols];
        let qr = &q.data()[r * cols..(r + 1) * cols];
        for (&pv, &qv) in pr.iter().zip(qr) {
            let pf = pv.max(KL_PROB_FLOOR);
            let qf = qv.max(KL_PROB_FLOOR);
            total += pf * (pf.ln() - qf.ln());
        }
    }
    Tensor::from_parts_unchecked(vec![1], vec![total / rows as f64])
}

fn kl_backward(grad: f64, p: &Tensor, q: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = kl_rows(p);
    let scale = grad / rows as f64;
    let n = rows * cols;
    let mut dp = vec![0.0; n];
    let mut dq = vec![0.0; n];
    for i in 0..n {
        let pv = p.data()[i];
        let qv = q.data()[i];
        let pf = pv.max(KL_PROB_FLOOR);
        let qf = qv.max(KL_PROB_FLOOR);
        if pv > KL_PROB_FLOOR {
            dp[i] = scale * (pf.ln() - qf.ln() + 1.0);
        }
        if qv > KL_PROB_FLOOR {
            dq[i] = -scale * pf / qf;
        }
    }
    (dp, dq)
}
