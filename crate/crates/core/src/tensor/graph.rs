use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{broadcast_shape, eval, is_suffix, NodeId, Op};
use super::{Real, Result, Tensor, TensorError};

struct Node<T> {
    value: Rc<Vec<T>>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
}

/// Append-only record of operations. Cloning yields another handle to the
/// same record. Confined to one thread.
pub struct Graph<T> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a recorded node.
#[derive(Clone)]
pub struct Var<T> {
    graph: Graph<T>,
    id: NodeId,
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Inner { nodes: Vec::new() })),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Graph<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, value: Rc<Vec<T>>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor<T>) -> Var<T> {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(Rc::new(data), shape, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(Rc::new(data), shape, Op::Constant, false)
    }

    pub fn scalar(&self, v: T) -> Var<T> {
        self.constant(Tensor::scalar(v))
    }

    fn detached(&self, id: NodeId) -> Var<T> {
        let (value, shape) = {
            let inner = self.inner.borrow();
            let n = &inner.nodes[id];
            (Rc::clone(&n.value), n.shape.clone())
        };
        self.push(value, shape, Op::Constant, false)
    }

    fn record(&self, op: Op<T>, out_shape: Vec<usize>) -> Result<Var<T>> {
        let ids = op.inputs();
        let (value, requires_grad) = {
            let inner = self.inner.borrow();
            let inputs: Vec<(&[T], &[usize])> = ids
                .iter()
                .map(|&i| (inner.nodes[i].value.as_slice(), inner.nodes[i].shape.as_slice()))
                .collect();
            let value = eval(&op, &inputs, &out_shape);
            let rg = ids.iter().any(|&i| inner.nodes[i].requires_grad);
            (value, rg)
        };
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        Ok(self.push(Rc::new(value), out_shape, op, requires_grad))
    }

    /// Gradients of a scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the backward pass is itself recorded, so the
    /// returned gradients can be differentiated again. Without it the
    /// results are constants. Every `wrt` must influence `output`.
    pub fn grad(&self, output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Result<Vec<Var<T>>> {
        self.grad_impl(output, wrt, create_graph, false)
    }

    /// Like [`Graph::grad`] but variables that `output` does not depend on
    /// receive a zero gradient instead of an error.
    pub fn grad_allow_unused(
        &self,
        output: &Var<T>,
        wrt: &[&Var<T>],
        create_graph: bool,
    ) -> Result<Vec<Var<T>>> {
        self.grad_impl(output, wrt, create_graph, true)
    }

    fn grad_impl(
        &self,
        output: &Var<T>,
        wrt: &[&Var<T>],
        create_graph: bool,
        allow_unused: bool,
    ) -> Result<Vec<Var<T>>> {
        if !self.same(&output.graph) || wrt.iter().any(|w| !self.same(&w.graph)) {
            return Err(TensorError::ForeignVar);
        }
        let out_shape = output.shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarOutput(out_shape));
        }
        let end = output.id;

        // Nodes on some path from a wrt variable to the output.
        let mut reach = vec![false; end + 1];
        {
            let inner = self.inner.borrow();
            for w in wrt {
                if w.id <= end {
                    reach[w.id] = true;
                }
            }
            for i in 0..=end {
                if !reach[i] && inner.nodes[i].op.inputs().iter().any(|&j| reach[j]) {
                    reach[i] = true;
                }
            }
        }
        for w in wrt {
            if (w.id > end || !reach[end]) && !allow_unused {
                return Err(TensorError::Unreachable(w.id));
            }
        }

        let mut adj: Vec<Option<Var<T>>> = vec![None; end + 1];
        let mut ctx = Backward {
            graph: self,
            create_graph,
            detached: HashMap::new(),
        };
        if reach[end] {
            adj[end] = Some(self.constant(Tensor::ones(out_shape)));
        }
        for id in (0..=end).rev() {
            if !reach[id] {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if wrt.iter().any(|w| w.id == id) {
                // Keep the accumulated adjoint for the caller.
                adj[id] = Some(g.clone());
            }
            let op = self.inner.borrow().nodes[id].op.clone();
            for (input, contrib) in ctx.rules(id, &op, &g, &reach)? {
                adj[input] = Some(match adj[input].take() {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.id).and_then(|a| a.clone()) {
                Some(g) => Ok(g),
                None if allow_unused => Ok(self.constant(Tensor::zeros(w.shape()))),
                None => Err(TensorError::Unreachable(w.id)),
            })
            .collect()
    }

    /// Re-evaluates every recorded operation from the leaves and constants and
    /// returns the recomputed values in node order.
    pub fn replay(&self) -> Vec<Vec<T>> {
        let inner = self.inner.borrow();
        let mut values: Vec<Vec<T>> = Vec::with_capacity(inner.nodes.len());
        for node in &inner.nodes {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.as_ref().clone(),
                ref op => {
                    let inputs: Vec<(&[T], &[usize])> = op
                        .inputs()
                        .iter()
                        .map(|&i| (values[i].as_slice(), inner.nodes[i].shape.as_slice()))
                        .collect();
                    eval(op, &inputs, &node.shape)
                }
            };
            values.push(v);
        }
        values
    }

    /// True when [`Graph::replay`] reproduces every recorded value bit for bit.
    pub fn verify_replay(&self) -> bool {
        let replayed = self.replay();
        let inner = self.inner.borrow();
        inner.nodes.iter().zip(&replayed).all(|(n, r)| {
            n.value.len() == r.len()
                && n.value.iter().zip(r).all(|(a, b)| a.to_f64().unwrap().to_bits() == b.to_f64().unwrap().to_bits())
        })
    }
}

struct Backward<'g, T: Real> {
    graph: &'g Graph<T>,
    create_graph: bool,
    detached: HashMap<NodeId, Var<T>>,
}

impl<T: Real> Backward<'_, T> {
    /// The forward value of `id` as used by backward rules: the node itself
    /// when recording the backward pass, a constant copy otherwise.
    fn input(&mut self, id: NodeId) -> Var<T> {
        if self.create_graph {
            Var {
                graph: self.graph.clone(),
                id,
            }
        } else {
            self.detached
                .entry(id)
                .or_insert_with(|| self.graph.detached(id))
                .clone()
        }
    }

    fn shape(&self, id: NodeId) -> Vec<usize> {
        self.graph.inner.borrow().nodes[id].shape.clone()
    }

    fn reduce(&self, g: Var<T>, id: NodeId) -> Result<Var<T>> {
        let target = self.shape(id);
        if g.shape() == target {
            Ok(g)
        } else {
            g.sum_to(&target)
        }
    }

    fn rules(&mut self, id: NodeId, op: &Op<T>, g: &Var<T>, reach: &[bool]) -> Result<Vec<(NodeId, Var<T>)>> {
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, ta, tb } => {
                if reach[a] {
                    let bv = self.input(b);
                    let ga = if ta { bv.matmul_t(g, tb, true)? } else { g.matmul_t(&bv, false, !tb)? };
                    out.push((a, ga));
                }
                if reach[b] {
                    let av = self.input(a);
                    let gb = if tb { g.matmul_t(&av, true, ta)? } else { av.matmul_t(g, !ta, false)? };
                    out.push((b, gb));
                }
            }
            Op::Add(a, b) => {
                if reach[a] {
                    out.push((a, self.reduce(g.clone(), a)?));
                }
                if reach[b] {
                    out.push((b, self.reduce(g.clone(), b)?));
                }
            }
            Op::Sub(a, b) => {
                if reach[a] {
                    out.push((a, self.reduce(g.clone(), a)?));
                }
                if reach[b] {
                    out.push((b, self.reduce(g.neg()?, b)?));
                }
            }
            Op::Mul(a, b) => {
                if reach[a] {
                    let bv = self.input(b);
                    out.push((a, self.reduce(g.mul(&bv)?, a)?));
                }
                if reach[b] {
                    let av = self.input(a);
                    out.push((b, self.reduce(g.mul(&av)?, b)?));
                }
            }
            Op::Div(a, b) => {
                let bv = self.input(b);
                if reach[a] {
                    out.push((a, self.reduce(g.div(&bv)?, a)?));
                }
                if reach[b] {
                    let y = self.input(id);
                    out.push((b, self.reduce(g.mul(&y)?.div(&bv)?.neg()?, b)?));
                }
            }
            Op::Affine { x, scale, .. } => out.push((x, g.scale(scale)?)),
            Op::Sin(x) => {
                let xv = self.input(x);
                out.push((x, g.mul(&xv.cos()?)?));
            }
            Op::Cos(x) => {
                let xv = self.input(x);
                out.push((x, g.mul(&xv.sin()?)?.neg()?));
            }
            Op::Sigmoid(x) => {
                let y = self.input(id);
                let dy = y.mul(&y.affine(-T::one(), T::one())?)?;
                out.push((x, g.mul(&dy)?));
            }
            Op::Ln(x) => {
                let xv = self.input(x);
                out.push((x, g.div(&xv)?));
            }
            Op::Clamp { x, lo, hi } => {
                // Subgradient 1 on [lo, hi] (boundary included), 0 outside.
                let (mask, shape) = {
                    let inner = self.graph.inner.borrow();
                    let n = &inner.nodes[x];
                    let m: Vec<T> = n
                        .value
                        .iter()
                        .map(|&v| if v >= lo && v <= hi { T::one() } else { T::zero() })
                        .collect();
                    (m, n.shape.clone())
                };
                let mask = self.graph.constant(Tensor::new(shape, mask)?);
                out.push((x, g.mul(&mask)?));
            }
            Op::SumTo { x } => {
                let shape = self.shape(x);
                out.push((x, g.broadcast_to(&shape)?));
            }
            Op::BroadcastTo { x } => {
                let shape = self.shape(x);
                out.push((x, g.sum_to(&shape)?));
            }
            Op::SquaredError(a, b) => {
                let diff = self.input(a).sub(&self.input(b))?;
                let ga = g.broadcast_to(&diff.shape())?.mul(&diff)?.scale(T::from_f64_lossy(2.0))?;
                if reach[b] {
                    out.push((b, ga.neg()?));
                }
                if reach[a] {
                    out.push((a, ga));
                }
            }
        }
        Ok(out)
    }
}

impl<T: Real> Var<T> {
    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Shared view of the recorded values.
    pub fn values(&self) -> Rc<Vec<T>> {
        Rc::clone(&self.graph.inner.borrow().nodes[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let inner = self.graph.inner.borrow();
        let n = &inner.nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.as_ref().clone()).expect("recorded shape")
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        let v = self.values();
        assert_eq!(v.len(), 1, "item() on a tensor with {} values", v.len());
        v[0]
    }

    /// A constant copy of this value, cut from the graph.
    pub fn detach(&self) -> Var<T> {
        self.graph.detached(self.id)
    }

    fn check_same(&self, other: &Var<T>) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn broadcast_op(&self, other: &Var<T>, name: &'static str, op: Op<T>) -> Result<Var<T>> {
        self.check_same(other)?;
        let shape = broadcast_shape(name, &self.shape(), &other.shape())?;
        self.graph.record(op, shape)
    }

    pub fn matmul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product where `ta`/`tb` transpose the respective operand.
    pub fn matmul_t(&self, other: &Var<T>, ta: bool, tb: bool) -> Result<Var<T>> {
        self.check_same(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch());
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(mismatch());
        }
        self.graph.record(
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
            vec![m, n],
        )
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.broadcast_op(other, "add", Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.broadcast_op(other, "sub", Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.broadcast_op(other, "mul", Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        self.broadcast_op(other, "div", Op::Div(self.id, other.id))
    }

    /// `scale * x + shift` elementwise.
    pub fn affine(&self, scale: T, shift: T) -> Result<Var<T>> {
        self.graph.record(
            Op::Affine {
                x: self.id,
                scale,
                shift,
            },
            self.shape(),
        )
    }

    pub fn scale(&self, c: T) -> Result<Var<T>> {
        self.affine(c, T::zero())
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.affine(-T::one(), T::zero())
    }

    pub fn add_scalar(&self, c: T) -> Result<Var<T>> {
        self.affine(T::one(), c)
    }

    pub fn sin(&self) -> Result<Var<T>> {
        self.graph.record(Op::Sin(self.id), self.shape())
    }

    pub fn cos(&self) -> Result<Var<T>> {
        self.graph.record(Op::Cos(self.id), self.shape())
    }

    pub fn sigmoid(&self) -> Result<Var<T>> {
        self.graph.record(Op::Sigmoid(self.id), self.shape())
    }

    pub fn ln(&self) -> Result<Var<T>> {
        self.graph.record(Op::Ln(self.id), self.shape())
    }

    /// Hard clamp to `[lo, hi]`.
    pub fn clamp(&self, lo: T, hi: T) -> Result<Var<T>> {
        self.graph.record(Op::Clamp { x: self.id, lo, hi }, self.shape())
    }

    /// Sums leading dimensions away so the result has `shape`, which must be
    /// a suffix of this tensor's shape.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Var<T>> {
        let own = self.shape();
        if !is_suffix(shape, &own) {
            return Err(TensorError::ShapeMismatch {
                op: "sum_to",
                lhs: own,
                rhs: shape.to_vec(),
            });
        }
        self.graph.record(Op::SumTo { x: self.id }, shape.to_vec())
    }

    /// Repeats this tensor along new leading dimensions.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<T>> {
        let own = self.shape();
        if !is_suffix(&own, shape) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: own,
                rhs: shape.to_vec(),
            });
        }
        self.graph.record(Op::BroadcastTo { x: self.id }, shape.to_vec())
    }

    pub fn sum(&self) -> Result<Var<T>> {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let n = T::from_usize(self.len().max(1)).expect("count");
        self.sum()?.scale(T::one() / n)
    }

    /// `sum((self - target)^2)` as a scalar.
    pub fn squared_error(&self, target: &Var<T>) -> Result<Var<T>> {
        self.check_same(target)?;
        let (a, b) = (self.shape(), target.shape());
        if a != b {
            return Err(TensorError::ShapeMismatch {
                op: "squared_error",
                lhs: a,
                rhs: b,
            });
        }
        self.graph.record(Op::SquaredError(self.id, target.id), vec![])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g64() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn sine_of_zero() {
        let g = g64();
        let x = g.leaf(Tensor::scalar(0.0));
        assert_eq!(x.sin().unwrap().item(), 0.0);
    }

    #[test]
    fn clamp_saturates_with_zero_subgradient() {
        let g = g64();
        let x = g.leaf(Tensor::scalar(1.3));
        let y = x.clamp(0.0, 1.0).unwrap();
        assert_eq!(y.item(), 1.0);
        assert_eq!(g.grad(&y, &[&x], false).unwrap()[0].item(), 0.0);
    }

    #[test]
    fn clamp_boundary_counts_as_interior() {
        let g = g64();
        let x = g.leaf(Tensor::vector(vec![0.0, 1.0, 0.5, -0.1]));
        let y = x.clamp(0.0, 1.0).unwrap().sum().unwrap();
        let d = g.grad(&y, &[&x], false).unwrap()[0].to_tensor();
        assert_eq!(d.data(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn squared_error_uses_sum_convention() {
        let g = g64();
        let p = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let t = g.constant(Tensor::vector(vec![1.0, 1.0]));
        assert_eq!(p.squared_error(&t).unwrap().item(), 1.0);
    }

    #[test]
    fn first_and_second_derivatives() {
        let g = g64();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        assert_eq!(g.grad(&y, &[&x], false).unwrap()[0].item(), 6.0);

        let x = g.leaf(Tensor::scalar(2.0));
        let cube = x.mul(&x).unwrap().mul(&x).unwrap();
        let d1 = g.grad(&cube, &[&x], true).unwrap();
        let d2 = g.grad(&d1[0], &[&x], false).unwrap();
        assert_eq!(d1[0].item(), 12.0);
        assert_eq!(d2[0].item(), 12.0);
    }

    #[test]
    fn one_step_maml_outer_gradient() {
        // L(θ) = θ², θ' = θ - 0.1·2θ, d L(θ')/dθ = 2·0.8·0.8·θ.
        let g = g64();
        let theta = g.leaf(Tensor::scalar(1.0));
        let inner = theta.mul(&theta).unwrap();
        let dtheta = g.grad(&inner, &[&theta], true).unwrap().remove(0);
        let adapted = theta.sub(&dtheta.scale(0.1).unwrap()).unwrap();
        let outer = adapted.mul(&adapted).unwrap();
        let d = g.grad(&outer, &[&theta], false).unwrap()[0].item();
        assert!((d - 1.28).abs() < 1e-15, "{d}");
    }

    #[test]
    fn broadcasting_follows_trailing_dims() {
        let g = g64();
        let a = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.leaf(Tensor::vector(vec![10.0, 20.0, 30.0]));
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_tensor().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let s = c.sum().unwrap();
        let grads = g.grad(&s, &[&a, &b], false).unwrap();
        assert_eq!(grads[1].to_tensor().data(), &[2.0, 2.0, 2.0]);
        let bad = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(a.add(&bad), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_transposes_agree() {
        let g = g64();
        let a = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]).unwrap());
        // a · bᵀ
        let c = a.matmul_t(&b, false, true).unwrap();
        assert_eq!(c.shape(), vec![2, 2]);
        assert_eq!(c.to_tensor().data(), &[-2.0, 5.5, -2.0, 16.0]);
        // aᵀ · b
        let d = a.matmul_t(&b, true, false).unwrap();
        assert_eq!(d.shape(), vec![3, 3]);
        assert_eq!(d.to_tensor().data()[0], 1.0 + 8.0);
    }

    #[test]
    fn non_finite_is_an_error() {
        let g = g64();
        let x = g.leaf(Tensor::scalar(0.0));
        assert_eq!(x.ln().unwrap_err(), TensorError::NonFinite { op: "ln" });
    }

    #[test]
    fn non_scalar_and_foreign_outputs_are_rejected() {
        let g = g64();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.grad(&x, &[&x], false), Err(TensorError::NonScalarOutput(_))));
        let other = g64();
        let y = other.leaf(Tensor::scalar(1.0));
        let s = x.sum().unwrap();
        assert_eq!(g.grad(&s, &[&y], false).unwrap_err(), TensorError::ForeignVar);
        let z = g.leaf(Tensor::scalar(1.0));
        assert!(matches!(g.grad(&s, &[&z], false), Err(TensorError::Unreachable(_))));
        assert_eq!(g.grad_allow_unused(&s, &[&z], false).unwrap()[0].item(), 0.0);
    }

    #[test]
    fn replay_is_bit_identical() {
        let g = g64();
        let x = g.leaf(Tensor::vector(vec![0.3, -1.2, 2.5]));
        let w = g.leaf(Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap());
        let h = x.broadcast_to(&[1, 3]).unwrap().matmul(&w).unwrap().sin().unwrap();
        let loss = h.sigmoid().unwrap().sum().unwrap();
        let _ = g.grad(&loss, &[&x, &w], true).unwrap();
        assert!(g.verify_replay());
    }
}
