//! Minimal tape-based reverse-mode differentiation over dense matrices.
//!
//! Values are computed eagerly when an operation is recorded. The op set is
//! closed: it covers exactly what the encoder, the coupling flow and the
//! training losses need.
//!
//! Model code is written once against the [`Graph`] trait and runs either on a
//! [`Tape`] (for training) or on [`Eager`] (for scoring, no graph kept). Both
//! share the kernels in [`Op::eval`], so forward values are bit-identical.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{broadcast_kind, Broadcast, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SumAxis {
    /// Sum every entry into a `1 x 1` scalar.
    All,
    /// Sum each row into an `n x 1` column.
    Rows,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    Leaf,
    Matmul,
    /// Same-shape, row-bias or scalar broadcast on the right operand.
    Add,
    Sub,
    Mul,
    Exp,
    Tanh,
    Sum(SumAxis),
    Mean,
    /// `max(x, c)` elementwise; the subgradient at `x == c` is zero.
    MaxConst(T),
    Slice { start: usize, end: usize },
    Concat,
    ScalarMul(T),
}

impl<T: Real> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Exp => "exp",
            Op::Tanh => "tanh",
            Op::Sum(_) => "sum",
            Op::Mean => "mean",
            Op::MaxConst(_) => "max-with-constant",
            Op::Slice { .. } => "slice",
            Op::Concat => "concat",
            Op::ScalarMul(_) => "scalar-mul",
        }
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        let ok = match self {
            Op::Leaf => false,
            Op::Matmul | Op::Add | Op::Sub | Op::Mul => n == 2,
            Op::Concat => n >= 1,
            _ => n == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{} cannot be recorded with {n} input(s)",
                self.name()
            )))
        }
    }

    /// Forward kernel.
    pub fn eval(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        self.check_arity(inputs.len())?;
        let x = inputs[0];
        match self {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Matmul => x.matmul(inputs[1]),
            Op::Add => x.add(inputs[1]),
            Op::Sub => x.sub(inputs[1]),
            Op::Mul => x.mul(inputs[1]),
            Op::Exp => Ok(x.map(T::exp)),
            Op::Tanh => Ok(x.map(T::tanh)),
            Op::Sum(SumAxis::All) => Ok(Tensor::scalar(x.sum())),
            Op::Sum(SumAxis::Rows) => Ok(x.row_sums()),
            Op::Mean => Ok(Tensor::scalar(x.mean()?)),
            Op::MaxConst(c) => Ok(x.map(|v| v.max(*c))),
            Op::Slice { start, end } => x.slice_cols(*start, *end),
            Op::Concat => Tensor::concat_cols(inputs),
            Op::ScalarMul(k) => Ok(x.scale(*k)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    parents: Vec<NodeId>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

impl<T> Node<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn op(&self) -> &Op<T> {
        &self.op
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }
}

/// Append-only record of a computation. Parents always precede children.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    /// Adds an input. Gradients are only tracked for leaves with `requires_grad`
    /// and for nodes downstream of them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(Node {
            value,
            op: Op::Leaf,
            parents: Vec::new(),
            grad: None,
            requires_grad,
        })
    }

    pub fn record(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, Op::Leaf) {
            return Err(Error::InvalidArgument("use Tape::leaf to add inputs".into()));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::InvalidArgument(format!("node {} is not on this tape", bad.0)));
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let value = op.eval(&values)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Node {
            value,
            op,
            parents: inputs.to_vec(),
            grad: None,
            requires_grad,
        }))
    }

    fn push(&mut self, node: Node<T>) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to `id`. `None` when
    /// the node does not influence the loss or does not require gradients.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Reverse accumulation from a scalar loss.
    ///
    /// All gradients are cleared first, so calling this twice yields the same
    /// table rather than doubling it.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("node {} is not on this tape", loss.0)));
        }
        let shape = self.nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {}x{}", shape.0, shape.1),
            ));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                let contributions = self.local_grads(i, &g)?;
                for (parent, contrib) in contributions {
                    let slot = &mut self.nodes[parent.0].grad;
                    *slot = Some(match slot.take() {
                        None => contrib,
                        Some(acc) => acc.add(&contrib)?,
                    });
                }
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its parents that require grads.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let parents = &node.parents;
        let wants = |k: usize| self.nodes[parents[k].0].requires_grad;
        let pv = |k: usize| &self.nodes[parents[k].0].value;
        let mut out = Vec::with_capacity(parents.len());

        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                if wants(0) {
                    out.push((parents[0], g.matmul_nt(pv(1))?));
                }
                if wants(1) {
                    out.push((parents[1], pv(0).matmul_tn(g)?));
                }
            }
            Op::Add | Op::Sub => {
                if wants(0) {
                    out.push((parents[0], g.clone()));
                }
                if wants(1) {
                    let reduced = reduce_broadcast(g, pv(0), pv(1))?;
                    let reduced = if matches!(node.op, Op::Sub) {
                        reduced.scale(-T::one())
                    } else {
                        reduced
                    };
                    out.push((parents[1], reduced));
                }
            }
            Op::Mul => {
                if wants(0) {
                    out.push((parents[0], g.mul(pv(1))?));
                }
                if wants(1) {
                    out.push((parents[1], g.mul(pv(0))?));
                }
            }
            Op::Exp => {
                if wants(0) {
                    out.push((parents[0], g.mul(&node.value)?));
                }
            }
            Op::Tanh => {
                if wants(0) {
                    let d = node.value.map(|y| T::one() - y * y);
                    out.push((parents[0], g.mul(&d)?));
                }
            }
            Op::Sum(axis) => {
                if wants(0) {
                    let (r, c) = pv(0).shape();
                    let grad = match axis {
                        SumAxis::All => Tensor::filled(r, c, g.item()?),
                        SumAxis::Rows => Tensor::from_fn(r, c, |row, _| g.get(row, 0)),
                    };
                    out.push((parents[0], grad));
                }
            }
            Op::Mean => {
                if wants(0) {
                    let (r, c) = pv(0).shape();
                    let scaled = g.item()? / T::from_usize_lossy(r * c);
                    out.push((parents[0], Tensor::filled(r, c, scaled)));
                }
            }
            Op::MaxConst(c) => {
                if wants(0) {
                    let x = pv(0);
                    let mut grad = g.clone();
                    for (gv, &xv) in grad.data_mut().iter_mut().zip(x.data()) {
                        if xv <= *c {
                            *gv = T::zero();
                        }
                    }
                    out.push((parents[0], grad));
                }
            }
            Op::Slice { start, end } => {
                if wants(0) {
                    let (r, c) = pv(0).shape();
                    let mut grad = Tensor::zeros(r, c);
                    for row in 0..r {
                        for col in *start..*end {
                            grad.set(row, col, g.get(row, col - start));
                        }
                    }
                    out.push((parents[0], grad));
                }
            }
            Op::Concat => {
                let mut offset = 0;
                for k in 0..parents.len() {
                    let w = pv(k).cols();
                    if wants(k) {
                        out.push((parents[k], g.slice_cols(offset, offset + w)?));
                    }
                    offset += w;
                }
            }
            Op::ScalarMul(k) => {
                if wants(0) {
                    out.push((parents[0], g.scale(*k)));
                }
            }
        }
        Ok(out)
    }
}

/// Folds an output gradient back onto a broadcast right operand.
fn reduce_broadcast<T: Real>(g: &Tensor<T>, lhs: &Tensor<T>, rhs: &Tensor<T>) -> Result<Tensor<T>> {
    match broadcast_kind(lhs, rhs) {
        Some(Broadcast::Same) => Ok(g.clone()),
        Some(Broadcast::Row) => {
            let mut acc = Tensor::zeros(1, g.cols());
            for r in 0..g.rows() {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.row_slice(r)) {
                    *a = *a + v;
                }
            }
            Ok(acc)
        }
        Some(Broadcast::Scalar) => Ok(Tensor::scalar(g.sum())),
        None => Err(Error::shape("add", "broadcast changed after recording")),
    }
}

/// A place to evaluate model code: a recording [`Tape`] or the [`Eager`]
/// evaluator.
pub trait Graph<T: Real> {
    type Var: Clone;

    fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Self::Var;

    fn apply(&mut self, op: Op<T>, inputs: &[&Self::Var]) -> Result<Self::Var>;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;

    fn constant(&mut self, value: Tensor<T>) -> Self::Var {
        self.input(value, false)
    }

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Matmul, &[a, b])
    }

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Add, &[a, b])
    }

    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sub, &[a, b])
    }

    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mul, &[a, b])
    }

    fn exp(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Exp, &[a])
    }

    fn tanh(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Tanh, &[a])
    }

    fn sum(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sum(SumAxis::All), &[a])
    }

    fn row_sum(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sum(SumAxis::Rows), &[a])
    }

    fn mean(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mean, &[a])
    }

    fn max_const(&mut self, a: &Self::Var, c: T) -> Result<Self::Var> {
        self.apply(Op::MaxConst(c), &[a])
    }

    fn slice(&mut self, a: &Self::Var, start: usize, end: usize) -> Result<Self::Var> {
        self.apply(Op::Slice { start, end }, &[a])
    }

    fn concat(&mut self, parts: &[&Self::Var]) -> Result<Self::Var> {
        self.apply(Op::Concat, parts)
    }

    fn scale(&mut self, a: &Self::Var, k: T) -> Result<Self::Var> {
        self.apply(Op::ScalarMul(k), &[a])
    }
}

impl<T: Real> Graph<T> for Tape<T> {
    type Var = NodeId;

    fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.leaf(value, requires_grad)
    }

    fn apply(&mut self, op: Op<T>, inputs: &[&NodeId]) -> Result<NodeId> {
        let ids: Vec<NodeId> = inputs.iter().map(|&&id| id).collect();
        self.record(op, &ids)
    }

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor<T> {
        Tape::value(self, *v)
    }
}

/// Forward-only evaluation with no recorded graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Real> Graph<T> for Eager {
    type Var = Tensor<T>;

    fn input(&mut self, value: Tensor<T>, _requires_grad: bool) -> Tensor<T> {
        value
    }

    fn apply(&mut self, op: Op<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if matches!(op, Op::Leaf) {
            return Err(Error::InvalidArgument("leaf is not an operation".into()));
        }
        op.eval(inputs)
    }

    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn add_and_exp_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(s(2.0), true);
        let y = tape.leaf(s(3.0), true);
        let z = tape.record(Op::Add, &[x, y]).unwrap();
        assert_eq!(tape.value(z).item().unwrap(), 5.0);
        let zero = tape.leaf(s(0.0), false);
        let e = tape.record(Op::Exp, &[zero]).unwrap();
        assert_eq!(tape.value(e).item().unwrap(), 1.0);
    }

    #[test]
    fn matmul_records_hand_product() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let b = tape.leaf(Tensor::new(3, 1, vec![0.5, -1.0, 2.0]).unwrap(), true);
        let c = tape.record(Op::Matmul, &[a, b]).unwrap();
        // 0.5 - 2 + 6 = 4.5 ; 2 - 5 + 12 = 9
        assert_eq!(tape.value(c).shape(), (2, 1));
        assert_eq!(tape.value(c).data(), &[4.5, 9.0]);
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(2, 3), true);
        let b = tape.leaf(Tensor::zeros(2, 3), true);
        let err = tape.record(Op::Matmul, &[a, b]).unwrap_err().to_string();
        assert!(err.contains("2x3 vs 2x3"), "{err}");
    }

    #[test]
    fn arity_and_unknown_nodes_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(s(1.0), true);
        assert!(tape.record(Op::Add, &[a]).is_err());
        assert!(tape.record(Op::Exp, &[NodeId(9)]).is_err());
        assert!(tape.record(Op::Leaf, &[a]).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(s(3.0), true);
        let y = tape.record(Op::Mul, &[x, x]).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sum_exp_gradient() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::row(&[0.0, 0.0]), true);
        let e = tape.record(Op::Exp, &[v]).unwrap();
        let l = tape.record(Op::Sum(SumAxis::All), &[e]).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_is_idempotent() {
        let mut tape = Tape::new();
        let x = tape.leaf(s(1.5), true);
        let y = tape.record(Op::Tanh, &[x]).unwrap();
        let z = tape.record(Op::Mul, &[y, x]).unwrap();
        tape.backward(z).unwrap();
        let first = tape.grad(x).unwrap().clone();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &first);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn max_const_kink_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[-1.0, 0.0, 2.0]), true);
        let m = tape.record(Op::MaxConst(0.0), &[x]).unwrap();
        let l = tape.record(Op::Sum(SumAxis::All), &[m]).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(s(2.0), false);
        let x = tape.leaf(s(5.0), true);
        let y = tape.record(Op::Mul, &[w, x]).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::from_fn(3, 2, |r, c| (r + c) as f64), true);
        let bias = tape.leaf(Tensor::row(&[1.0, -1.0]), true);
        let k = tape.leaf(s(0.5), true);
        let a = tape.record(Op::Add, &[m, bias]).unwrap();
        let b = tape.record(Op::Sub, &[a, k]).unwrap();
        let l = tape.record(Op::Sum(SumAxis::All), &[b]).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(bias).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(tape.grad(k).unwrap().item().unwrap(), -6.0);
    }

    #[test]
    fn eager_and_tape_agree_bitwise() {
        let x = Tensor::from_fn(4, 3, |r, c| ((r * 3 + c) as f64 * 0.37).sin());
        let w = Tensor::from_fn(3, 2, |r, c| ((r + 5 * c) as f64 * 0.11).cos());
        let mut tape = Tape::new();
        let xt = tape.leaf(x.clone(), false);
        let wt = tape.leaf(w.clone(), true);
        let ht = tape.matmul(&xt, &wt).unwrap();
        let ht = tape.tanh(&ht).unwrap();
        let ht = tape.row_sum(&ht).unwrap();
        let mut eager = Eager;
        let h: Tensor<f64> = eager.matmul(&x, &w).unwrap();
        let h = eager.tanh(&h).unwrap();
        let h = eager.row_sum(&h).unwrap();
        assert_eq!(tape.value(ht), &h);
    }
}
