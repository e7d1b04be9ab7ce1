use std::collections::BTreeMap;

use super::{Array, AutodiffError, Graph, NodeId, Op, ParameterSet, Result, Shape};

impl Graph {
    /// Reduces `g` by summation until it has `target` shape (adjoint of broadcasting).
    fn sum_to(&mut self, mut g: NodeId, target: Shape) -> Result<NodeId> {
        let s = self.shape(g);
        if s == target {
            return Ok(g);
        }
        if target.rows == 1 && s.rows != 1 {
            g = self.build(Op::SumRows, &[g])?;
        }
        if target.cols == 1 && self.shape(g).cols != 1 {
            g = self.build(Op::SumCols, &[g])?;
        }
        Ok(g)
    }

    fn broadcast_to(&mut self, g: NodeId, target: Shape) -> Result<NodeId> {
        if self.shape(g) == target {
            Ok(g)
        } else {
            self.build(Op::BroadcastTo(target), &[g])
        }
    }

    /// Vector-Jacobian product for every input of `node`, as new graph nodes.
    /// `None` marks an input that receives no gradient.
    fn vjp(&mut self, node: NodeId, g: NodeId) -> Result<Vec<Option<NodeId>>> {
        let op = self.op(node).clone();
        let inputs = self.inputs(node).to_vec();
        let shape_of = |graph: &Graph, i: usize| graph.shape(inputs[i]);
        let out = match op {
            Op::Constant | Op::Parameter(_) => Vec::new(),
            Op::Sign | Op::Step | Op::InRange { .. } => vec![None],
            Op::GreaterEq => vec![None, None],
            Op::Add => {
                let ga = self.sum_to(g, shape_of(self, 0))?;
                let gb = self.sum_to(g, shape_of(self, 1))?;
                vec![Some(ga), Some(gb)]
            }
            Op::Sub => {
                let ga = self.sum_to(g, shape_of(self, 0))?;
                let ng = self.neg(g)?;
                let gb = self.sum_to(ng, shape_of(self, 1))?;
                vec![Some(ga), Some(gb)]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let gb_full = self.mul(g, a)?;
                let ga_full = self.mul(g, b)?;
                let ga = self.sum_to(ga_full, shape_of(self, 0))?;
                let gb = self.sum_to(gb_full, shape_of(self, 1))?;
                vec![Some(ga), Some(gb)]
            }
            Op::Div => {
                // d(a/b)/da = 1/b, d(a/b)/db = -(a/b)/b
                let b = inputs[1];
                let ga_full = self.div(g, b)?;
                let ga = self.sum_to(ga_full, shape_of(self, 0))?;
                let t = self.mul(g, node)?;
                let t = self.div(t, b)?;
                let t = self.neg(t)?;
                let gb = self.sum_to(t, shape_of(self, 1))?;
                vec![Some(ga), Some(gb)]
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let bt = self.transpose(b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, g)?;
                vec![Some(ga), Some(gb)]
            }
            Op::Transpose => vec![Some(self.transpose(g)?)],
            Op::Neg => vec![Some(self.neg(g)?)],
            Op::Exp => vec![Some(self.mul(g, node)?)],
            Op::Log => vec![Some(self.div(g, inputs[0])?)],
            Op::Pow(p) => {
                let d = if p == 1.0 {
                    g
                } else {
                    let base = self.powf(inputs[0], p - 1.0)?;
                    let scaled = self.scale(base, p)?;
                    self.mul(g, scaled)?
                };
                vec![Some(d)]
            }
            Op::Sin => {
                let c = self.cos(inputs[0])?;
                vec![Some(self.mul(g, c)?)]
            }
            Op::Cos => {
                let s = self.build(Op::Sin, &[inputs[0]])?;
                let s = self.neg(s)?;
                vec![Some(self.mul(g, s)?)]
            }
            Op::Arccos { eps } => {
                // -1/sqrt(1 - c^2) on the clamped input, zero outside the clamp
                let x = inputs[0];
                let (lo, hi) = (-1.0 + eps, 1.0 - eps);
                let c = self.clamp(x, lo, hi)?;
                let c2 = self.mul(c, c)?;
                let one = self.scalar(1.0);
                let r = self.sub(one, c2)?;
                let r = self.powf(r, -0.5)?;
                let inside = self.build(Op::InRange { lo, hi }, &[x])?;
                let d = self.mul(r, inside)?;
                let d = self.mul(g, d)?;
                vec![Some(self.neg(d)?)]
            }
            Op::Abs => {
                let s = self.build(Op::Sign, &[inputs[0]])?;
                vec![Some(self.mul(g, s)?)]
            }
            Op::Relu => {
                let s = self.build(Op::Step, &[inputs[0]])?;
                vec![Some(self.mul(g, s)?)]
            }
            Op::Clamp { lo, hi } => {
                let inside = self.build(Op::InRange { lo, hi }, &[inputs[0]])?;
                vec![Some(self.mul(g, inside)?)]
            }
            Op::Maximum => {
                let (a, b) = (inputs[0], inputs[1]);
                let pick_a = self.build(Op::GreaterEq, &[a, b])?;
                let one = self.scalar(1.0);
                let pick_b = self.sub(one, pick_a)?;
                let ga_full = self.mul(g, pick_a)?;
                let gb_full = self.mul(g, pick_b)?;
                let ga = self.sum_to(ga_full, shape_of(self, 0))?;
                let gb = self.sum_to(gb_full, shape_of(self, 1))?;
                vec![Some(ga), Some(gb)]
            }
            Op::Sum => vec![Some(self.broadcast_to(g, shape_of(self, 0))?)],
            Op::Mean => {
                let n = shape_of(self, 0).len() as f64;
                let g = self.scale(g, 1.0 / n)?;
                vec![Some(self.broadcast_to(g, shape_of(self, 0))?)]
            }
            Op::SumRows | Op::SumCols => vec![Some(self.broadcast_to(g, shape_of(self, 0))?)],
            Op::BroadcastTo(_) => vec![Some(self.sum_to(g, shape_of(self, 0))?)],
            Op::L2NormalizeRows => {
                // y = x/|x|;  dx = (g - y * <g, y>) / |x|
                let x = inputs[0];
                let gy = self.mul(g, node)?;
                let gy = self.sum_cols(gy)?;
                let proj = self.mul(node, gy)?;
                let diff = self.sub(g, proj)?;
                let sq = self.mul(x, x)?;
                let sq = self.sum_cols(sq)?;
                let inv = self.powf(sq, -0.5)?;
                vec![Some(self.mul(diff, inv)?)]
            }
            Op::DotRows => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = self.mul(g, b)?;
                let gb = self.mul(g, a)?;
                vec![Some(ga), Some(gb)]
            }
            Op::SelectByIndex(index) => {
                let cols = shape_of(self, 0).cols;
                vec![Some(self.scatter_by_index(g, index, cols)?)]
            }
            Op::ScatterByIndex { index, .. } => vec![Some(self.select_by_index(g, index)?)],
            Op::SelectRows(index) => {
                let rows = shape_of(self, 0).rows;
                vec![Some(self.build(Op::ScatterRows { index, rows }, &[g])?)]
            }
            Op::ScatterRows { index, .. } => vec![Some(self.select_rows(g, index)?)],
            Op::LogSumExpRows => {
                // softmax(x) = exp(x - lse)
                let x = inputs[0];
                let shifted = self.sub(x, node)?;
                let soft = self.exp(shifted)?;
                vec![Some(self.mul(g, soft)?)]
            }
        };
        Ok(out)
    }

    /// Builds gradient nodes of `scalar` with respect to `wrt` leaves.
    ///
    /// With `differentiable` set the returned nodes are part of the graph and
    /// can be differentiated again. Otherwise they are evaluated and returned
    /// as detached constants. Leaves that `scalar` does not depend on receive
    /// zero gradients.
    pub fn gradient(
        &mut self,
        scalar: NodeId,
        wrt: &ParameterSet,
        differentiable: bool,
    ) -> Result<BTreeMap<String, NodeId>> {
        let shape = self.shape(scalar);
        if shape.len() != 1 {
            return Err(AutodiffError::NotScalar(shape.rows, shape.cols));
        }
        let root = scalar.0;

        // Forward pass over ids: which nodes depend on some wrt leaf.
        let mut depends = vec![false; root + 1];
        for (_, leaf) in wrt.iter() {
            if leaf.0 <= root {
                depends[leaf.0] = true;
            }
        }
        for i in 0..=root {
            if !depends[i] && !self.nodes[i].op.is_mask() {
                depends[i] = self.nodes[i].inputs.iter().any(|p| depends[p.0]);
            }
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; root + 1];
        if depends[root] {
            adjoint[root] = Some(self.scalar(1.0));
        }
        for i in (0..=root).rev() {
            let Some(g) = adjoint[i] else { continue };
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let inputs = self.nodes[i].inputs.clone();
            let contributions = self.vjp(NodeId(i), g)?;
            for (input, contribution) in inputs.into_iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !depends[input.0] {
                    continue;
                }
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }

        let mut out = BTreeMap::new();
        for (name, leaf) in wrt.iter() {
            let grad = match adjoint.get(leaf.0).copied().flatten() {
                Some(g) if differentiable => g,
                Some(g) => {
                    let value = self.evaluate(g)?.clone();
                    self.constant(value)
                }
                None => self.constant(Array::zeros(self.shape(leaf).dims())),
            };
            out.insert(name.to_string(), grad);
        }
        Ok(out)
    }

    /// Evaluated gradient values keyed by parameter name.
    pub fn gradient_values(
        &mut self,
        scalar: NodeId,
        wrt: &ParameterSet,
    ) -> Result<BTreeMap<String, Array>> {
        let grads = self.gradient(scalar, wrt, false)?;
        Ok(grads
            .into_iter()
            .map(|(name, id)| {
                let v = self.value(id).expect("detached gradients are constants").clone();
                (name, v)
            })
            .collect())
    }

    /// Derivative with respect to `second_wrt` of `<direction, ∇_{first_wrt} scalar>`.
    ///
    /// This is the mixed second-order term `∂²L/∂w∂m` contracted with a fixed
    /// direction in `w`-space.
    pub fn mixed_second(
        &mut self,
        scalar: NodeId,
        first_wrt: &ParameterSet,
        direction: &BTreeMap<String, Array>,
        second_wrt: &ParameterSet,
    ) -> Result<BTreeMap<String, Array>> {
        let first = self.gradient(scalar, first_wrt, true)?;
        let mut inner: Option<NodeId> = None;
        for (name, grad) in &first {
            let dir = direction
                .get(name)
                .ok_or_else(|| AutodiffError::MissingParameter(name.clone()))?;
            let expected = self.shape(*grad);
            if crate::autodiff::Shape::of(dir) != expected {
                return Err(AutodiffError::ShapeMismatch {
                    op: "mixed_second",
                    detail: format!("direction for `{name}` has shape {}", Shape::of(dir)),
                });
            }
            let d = self.constant(dir.clone());
            let prod = self.mul(d, *grad)?;
            let s = self.sum(prod)?;
            inner = Some(match inner {
                Some(acc) => self.add(acc, s)?,
                None => s,
            });
        }
        let inner = match inner {
            Some(node) => node,
            None => self.scalar(0.0),
        };
        self.gradient_values(inner, second_wrt)
    }
}
