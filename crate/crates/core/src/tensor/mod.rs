//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is either a constant (no tape node) or tracked by exactly one
//! [`Tape`]. Operations on tracked tensors append nodes to that tape while it
//! is recording. Backward sweeps express every vector-Jacobian product with
//! the same operations, so on a tape built with
//! [`Tape::with_higher_order`] gradients can be differentiated again.
//!
//! ```
//! use dlsc::tensor::{Array, Tape};
//!
//! let tape = Tape::with_higher_order();
//! let x = tape.leaf(Array::scalar(1.0));
//! let y = x.powf(3.0);
//! let dy = tape.grad(&y, &[&x], true).unwrap()[0].clone().unwrap();
//! let g = dy.mul(&dy).unwrap(); // (3x^2)^2
//! let dg = tape.grad(&g, &[&x], false).unwrap()[0].clone().unwrap();
//! assert!((dg.item() - 36.0).abs() < 1e-12);
//! ```

mod array;
mod check;
mod tape;

use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

pub use array::Array;
pub use check::{grad_check, grad_check_many};
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use tape::{Input, Op};

/// Default guard added inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone)]
struct NodeRef {
    tape: Tape,
    id: NodeId,
}

/// A value, optionally bound to a tape node.
#[derive(Clone)]
pub struct Tensor {
    value: Rc<Array>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape())
            .field("node", &self.node_id())
            .field("data", &self.value.data())
            .finish()
    }
}

/// Gradients of a scalar with respect to every leaf it depends on.
#[derive(Default)]
pub struct Gradients {
    by_node: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf tensor, if the output depends on it.
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        leaf.node_id().and_then(|id| self.by_node.get(&id))
    }

    /// Like [`Gradients::get`] but returns zeros when the output does not
    /// depend on `leaf`.
    pub fn get_or_zeros(&self, leaf: &Tensor) -> Array {
        self.get(leaf)
            .map(|g| g.value().clone())
            .unwrap_or_else(|| Array::zeros(leaf.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}

impl Tensor {
    /// An untracked tensor.
    pub fn constant(value: Array) -> Self {
        Tensor {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array::scalar(v))
    }

    pub(crate) fn from_rc(value: Rc<Array>) -> Self {
        Tensor { value, node: None }
    }

    pub(crate) fn tracked(value: Rc<Array>, tape: Tape, id: NodeId) -> Self {
        Tensor {
            value,
            node: Some(NodeRef { tape, id }),
        }
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one value.
    pub fn item(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "item() on shape {:?}", self.shape());
        self.value.data()[0]
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Tensor::from_rc(self.value.clone())
    }

    pub(crate) fn node_on(&self, tape: &Tape) -> Result<Option<NodeId>> {
        match &self.node {
            None => Ok(None),
            Some(n) if n.tape.same(tape) => Ok(Some(n.id)),
            Some(_) => Err(Error::Usage("tensor belongs to a different tape".into())),
        }
    }

    /// Gradients of this scalar with respect to every leaf on its tape.
    pub fn backward(&self) -> Result<Gradients> {
        self.backward_with(false)
    }

    /// As [`Tensor::backward`]; with `higher_order` the gradients are
    /// recorded and may be differentiated again.
    pub fn backward_with(&self, higher_order: bool) -> Result<Gradients> {
        let tape = self
            .tape()
            .ok_or_else(|| Error::Usage("backward from a tensor that is not on a tape".into()))?
            .clone();
        let by_node = tape.sweep(self, None, higher_order)?;
        Ok(Gradients { by_node })
    }

    // -- recording ---------------------------------------------------------

    fn record(op: Op, inputs: &[&Tensor], value: Array) -> Result<Tensor> {
        let mut tape: Option<&Tape> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match tape {
                    None => tape = Some(&n.tape),
                    Some(tp) if tp.same(&n.tape) => {}
                    Some(_) => {
                        return Err(Error::Usage(
                            "operands belong to different tapes".into(),
                        ))
                    }
                }
            }
        }
        let value = Rc::new(value);
        match tape {
            Some(tp) if tp.recording() => {
                let ins = inputs
                    .iter()
                    .map(|t| Input {
                        id: t.node_id(),
                        value: t.value.clone(),
                    })
                    .collect();
                let id = tp.push(op, ins, value.clone());
                Ok(Tensor::tracked(value, tp.clone(), id))
            }
            _ => Ok(Tensor::from_rc(value)),
        }
    }

    fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let vals: Vec<&Array> = inputs.iter().map(|t| t.value.as_ref()).collect();
        let value = op.forward(&vals)?;
        Self::record(op, inputs, value)
    }

    fn apply_unary(&self, op: Op) -> Tensor {
        Self::apply(op, &[self]).expect("elementwise unary op cannot fail")
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Add, &[self, other])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Sub, &[self, other])
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Mul, &[self, other])
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Div, &[self, other])
    }

    pub fn neg(&self) -> Tensor {
        self.apply_unary(Op::Neg)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.apply_unary(Op::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.apply_unary(Op::AddScalar(c))
    }

    pub fn powf(&self, c: f64) -> Tensor {
        self.apply_unary(Op::Pow(c))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same shape")
    }

    pub fn exp(&self) -> Tensor {
        self.apply_unary(Op::Exp)
    }

    /// `ln(x + eps)`, defined for every `x > -eps`.
    pub fn log_guarded(&self, eps: f64) -> Tensor {
        self.apply_unary(Op::Log(eps))
    }

    /// Unguarded natural log; fails on any value `<= 0`.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| **v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of {v}")));
        }
        Ok(self.apply_unary(Op::Log(0.0)))
    }

    pub fn sqrt(&self) -> Tensor {
        self.apply_unary(Op::Sqrt)
    }

    pub fn tanh(&self) -> Tensor {
        self.apply_unary(Op::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.apply_unary(Op::Sigmoid)
    }

    pub fn relu(&self) -> Tensor {
        self.apply_unary(Op::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.apply_unary(Op::LeakyRelu(slope))
    }

    // -- linear algebra and structure ------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::MatMul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        Self::apply(Op::Transpose, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Self::apply(Op::Reshape(shape.to_vec()), &[self])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        Self::apply(Op::BroadcastTo(shape.to_vec()), &[self])
    }

    /// Sums broadcast axes away so the result has `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        Self::apply(Op::SumTo(shape.to_vec()), &[self])
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        Self::apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        Self::apply(Op::Slice { axis, start, end }, &[self])
    }

    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Tensor> {
        Self::apply(
            Op::Pad {
                axis,
                before,
                after,
            },
            &[self],
        )
    }

    /// Row-wise softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        Self::apply(Op::Softmax, &[self])
    }

    // -- reductions ----------------------------------------------------------

    fn non_empty(&self) -> Result<()> {
        if self.value.is_empty() {
            return Err(Error::Domain("reduction over an empty tensor".into()));
        }
        Ok(())
    }

    /// Sum of all entries, or along `axis` (dropping it) when given.
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        self.non_empty()?;
        match axis {
            None => Self::apply(Op::SumAll, &[self]),
            Some(ax) => self.sum_axis(ax, false),
        }
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        Self::apply(Op::SumAxis { axis, keepdim }, &[self])
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        let n = match axis {
            None => self.value.len(),
            Some(ax) => {
                array::check_axis(self.shape(), ax)?;
                self.shape()[ax]
            }
        };
        Ok(self.sum(axis)?.scale(1.0 / n as f64))
    }

    /// Euclidean norm, `sqrt(sum x^2 + 1e-24)`, so the gradient at zero is
    /// zero rather than undefined.
    pub fn l2_norm(&self, axis: Option<usize>) -> Result<Tensor> {
        Ok(self.square().sum(axis)?.add_scalar(LOG_EPS * LOG_EPS).sqrt())
    }
}
