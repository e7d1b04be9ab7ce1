//! Reverse-mode differentiation over dense rank-2 arrays.
//!
//! A [`Graph`] owns a flat list of nodes; every node's inputs precede it, so
//! node order is a topological order. Gradients are built as ordinary graph
//! nodes ("create-graph" semantics), which means a gradient expression can be
//! differentiated again. That is what makes the backward-on-backward pass of
//! the meta-gradient possible without a separate tape replay.
//!
//! All arrays are `f64` and rank 2. Scalars are `1×1`. Elementwise binary ops
//! broadcast any axis of length 1.

mod check;
mod grad;
mod ops;

pub use check::{finite_difference_gradient, relative_error};
pub use ops::{Op, Shape};

use std::collections::BTreeMap;

use ndarray::Array2;
use thiserror::Error;

/// Dense real array carried by every node.
pub type Array = Array2<f64>;

/// Default clamp applied to `arccos` inputs before evaluation.
pub const ARCCOS_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown op kind `{0}`")]
    UnknownOp(String),
    #[error("node {0} is not part of this graph")]
    UnknownNode(usize),
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("leaf node {0} has no value")]
    MissingValue(usize),
    #[error("gradient root must be a 1x1 scalar, got {0}x{1}")]
    NotScalar(usize, usize),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("parameter `{0}` not found")]
    MissingParameter(String),
    #[error("index {index} out of range for axis of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("function value not finite at probe point {0}")]
    NonFiniteProbe(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Shape,
}

/// Named parameter leaves, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    leaves: BTreeMap<String, NodeId>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, node: NodeId) -> Result<()> {
        let name = name.into();
        if self.leaves.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        self.leaves.insert(name, node);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.leaves.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Subset containing only the given names.
    pub fn select<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<ParameterSet> {
        let mut out = ParameterSet::new();
        for name in names {
            let node = self
                .get(name)
                .ok_or_else(|| AutodiffError::MissingParameter(name.to_string()))?;
            out.insert(name, node)?;
        }
        Ok(out)
    }

    /// Total number of scalars across all leaves.
    pub fn scalar_count(&self, graph: &Graph) -> usize {
        self.leaves
            .values()
            .map(|&id| graph.shape(id).len())
            .sum()
    }
}

/// A differentiable expression graph.
///
/// Graphs are `Send` but hold no interior locking; hand them between threads,
/// don't share them.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Array>>,
    param_names: BTreeMap<String, NodeId>,
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

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Cached value of a node, if it has been evaluated (or is a leaf).
    pub fn value(&self, id: NodeId) -> Option<&Array> {
        self.values.get(id.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Shape, value: Option<Array>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, shape });
        self.values.push(value);
        id
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = Shape::of(&value);
        self.push(Op::Constant, Vec::new(), shape, Some(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array::from_elem((1, 1), value))
    }

    /// Registers a named parameter leaf. Names are unique per graph.
    pub fn parameter(&mut self, name: impl Into<String>, value: Array) -> Result<NodeId> {
        let name = name.into();
        if self.param_names.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        let shape = Shape::of(&value);
        let id = self.push(Op::Parameter(name.clone()), Vec::new(), shape, Some(value));
        self.param_names.insert(name, id);
        Ok(id)
    }

    pub fn parameter_id(&self, name: &str) -> Option<NodeId> {
        self.param_names.get(name).copied()
    }

    /// Replaces a leaf's value and drops every cached intermediate.
    pub fn set_value(&mut self, id: NodeId, value: Array) -> Result<()> {
        let node = self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))?;
        if !node.op.is_leaf() {
            return Err(AutodiffError::ShapeMismatch {
                op: node.op.name(),
                detail: "only leaves accept values".into(),
            });
        }
        if Shape::of(&value) != node.shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "set_value",
                detail: format!("expected {}, got {}", node.shape, Shape::of(&value)),
            });
        }
        self.values[id.0] = Some(value);
        for (node, slot) in self.nodes.iter().zip(self.values.iter_mut()) {
            if !node.op.is_leaf() {
                *slot = None;
            }
        }
        Ok(())
    }

    /// Appends a node after validating input shapes. Nothing is evaluated.
    pub fn build(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if op.is_leaf() {
            return Err(AutodiffError::ShapeMismatch {
                op: op.name(),
                detail: "leaves are created with `constant` or `parameter`".into(),
            });
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(AutodiffError::UnknownNode(id.0));
            }
        }
        let shapes: Vec<Shape> = inputs.iter().map(|&i| self.shape(i)).collect();
        let shape = op.infer_shape(&shapes)?;
        Ok(self.push(op, inputs.to_vec(), shape, None))
    }

    /// Builds an attribute-free op by its kind name (`"add"`, `"matmul"`, ...).
    pub fn build_named(&mut self, kind: &str, inputs: &[NodeId]) -> Result<NodeId> {
        let op = Op::from_name(kind)?;
        self.build(op, inputs)
    }

    /// Evaluates `root`, memoizing every intermediate on the way.
    pub fn evaluate(&mut self, root: NodeId) -> Result<&Array> {
        if root.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownNode(root.0));
        }
        if self.values[root.0].is_none() {
            let mut needed = vec![false; root.0 + 1];
            let mut stack = vec![root];
            while let Some(id) = stack.pop() {
                if needed[id.0] || self.values[id.0].is_some() {
                    continue;
                }
                needed[id.0] = true;
                stack.extend(self.nodes[id.0].inputs.iter().copied());
            }
            for i in 0..=root.0 {
                if !needed[i] {
                    continue;
                }
                let node = &self.nodes[i];
                if node.op.is_leaf() {
                    return Err(AutodiffError::MissingValue(i));
                }
                let args: Vec<&Array> = node
                    .inputs
                    .iter()
                    .map(|id| self.values[id.0].as_ref().expect("inputs evaluated first"))
                    .collect();
                let out = node.op.forward(&args, node.shape);
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(AutodiffError::NonFinite { op: node.op.name(), node: i });
                }
                self.values[i] = Some(out);
            }
        }
        Ok(self.values[root.0].as_ref().expect("just evaluated"))
    }

    /// Evaluates a `1×1` node and returns the scalar.
    pub fn evaluate_scalar(&mut self, root: NodeId) -> Result<f64> {
        let shape = self.shape(root);
        if shape.len() != 1 {
            return Err(AutodiffError::NotScalar(shape.rows, shape.cols));
        }
        Ok(self.evaluate(root)?[[0, 0]])
    }

    // Convenience builders. Each is a thin wrapper over `build`.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Transpose, &[a])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Neg, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Log, &[a])
    }
    pub fn powf(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.build(Op::Pow(p), &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Mean, &[a])
    }
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::Maximum, &[a, b])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Relu, &[a])
    }
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::L2NormalizeRows, &[a])
    }
    pub fn dot_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.build(Op::DotRows, &[a, b])
    }
    pub fn arccos(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Arccos { eps: ARCCOS_EPS }, &[a])
    }
    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Cos, &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::Abs, &[a])
    }
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.build(Op::Clamp { lo, hi }, &[a])
    }
    pub fn select_by_index(&mut self, a: NodeId, index: Vec<usize>) -> Result<NodeId> {
        self.build(Op::SelectByIndex(index), &[a])
    }
    pub fn select_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.build(Op::SelectRows(rows), &[a])
    }
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::SumCols, &[a])
    }
    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.build(Op::LogSumExpRows, &[a])
    }
    pub fn scatter_by_index(&mut self, a: NodeId, index: Vec<usize>, cols: usize) -> Result<NodeId> {
        self.build(Op::ScatterByIndex { index, cols }, &[a])
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let k = self.scalar(factor);
        self.mul(a, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn shape_propagation() {
        let mut g = Graph::new();
        let a = g.constant(Array::zeros((2, 2)));
        let b = g.constant(Array::zeros((2, 2)));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.shape(c), Shape::new(2, 2));

        let a = g.constant(Array::zeros((2, 3)));
        let b = g.constant(Array::zeros((3, 4)));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), Shape::new(2, 4));

        let b = g.constant(Array::zeros((2, 3)));
        assert!(matches!(g.matmul(a, b), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn unknown_op_kind() {
        let mut g = Graph::new();
        let a = g.scalar(1.0);
        assert_eq!(
            g.build_named("convolve", &[a]),
            Err(AutodiffError::UnknownOp("convolve".into()))
        );
        assert!(g.build_named("exp", &[a]).is_ok());
    }

    #[test]
    fn evaluate_basics() {
        let mut g = Graph::new();
        let x = g.parameter("x", array![[3.0]]).unwrap();
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.evaluate_scalar(y).unwrap(), 9.0);

        let v = g.constant(array![[3.0, 4.0]]);
        let n = g.l2_normalize_rows(v).unwrap();
        let out = g.evaluate(n).unwrap();
        assert!((out[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((out[[0, 1]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn arccos_is_clamped() {
        let mut g = Graph::new();
        let t = g.scalar(1.5);
        let a = g.arccos(t).unwrap();
        let v = g.evaluate_scalar(a).unwrap();
        assert!(v.is_finite());
        assert!((v - (1.0 - ARCCOS_EPS).acos()).abs() < 1e-15);
        assert!(v < 1e-3);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let z = g.scalar(0.0);
        let l = g.log(z).unwrap();
        assert!(matches!(g.evaluate(l), Err(AutodiffError::NonFinite { op: "log", .. })));
    }

    #[test]
    fn set_value_invalidates_cache() {
        let mut g = Graph::new();
        let x = g.parameter("x", array![[2.0]]).unwrap();
        let y = g.exp(x).unwrap();
        let first = g.evaluate_scalar(y).unwrap();
        g.set_value(x, array![[0.0]]).unwrap();
        assert_eq!(g.evaluate_scalar(y).unwrap(), 1.0);
        assert!(first > 7.0);
    }

    #[test]
    fn duplicate_parameter_rejected() {
        let mut g = Graph::new();
        g.parameter("w", array![[1.0]]).unwrap();
        assert!(matches!(
            g.parameter("w", array![[1.0]]),
            Err(AutodiffError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn broadcasting_row_and_scalar() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.constant(array![[10.0, 20.0]]);
        let s = g.scalar(2.0);
        let y = g.add(x, b).unwrap();
        let y = g.mul(y, s).unwrap();
        assert_eq!(g.evaluate(y).unwrap(), &array![[22.0, 44.0], [26.0, 48.0]]);
    }
}
