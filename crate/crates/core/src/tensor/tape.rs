//! The recording tape and the reverse sweep.
//!
//! Every vector-Jacobian product is written in terms of ordinary
//! [`Tensor`] operations. With recording left on during the sweep, the
//! gradients become tape nodes themselves and can be differentiated again.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::array::{self, Array};
use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Pow(f64),
    Exp,
    Log(f64),
    Sqrt,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    MatMul,
    Transpose,
    SumAll,
    SumAxis { axis: usize, keepdim: bool },
    SumTo(Vec<usize>),
    BroadcastTo(Vec<usize>),
    Reshape(Vec<usize>),
    Softmax,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Pad { axis: usize, before: usize, after: usize },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Pow(_) => "pow",
            Op::Exp => "exp",
            Op::Log(_) => "log",
            Op::Sqrt => "sqrt",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::SumAll => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumTo(_) => "sum_to",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Reshape(_) => "reshape",
            Op::Softmax => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
        }
    }

    /// Recomputes the forward value from input values.
    pub(crate) fn forward(&self, inputs: &[&Array]) -> Result<Array> {
        let a = inputs.first().copied();
        let unary = |f: &dyn Fn(f64) -> f64| Ok(a.unwrap().map(f));
        match self {
            Op::Leaf => Ok(a.expect("leaf replay needs its value").clone()),
            Op::Add => array::zip_broadcast(inputs[0], inputs[1], |x, y| x + y),
            Op::Sub => array::zip_broadcast(inputs[0], inputs[1], |x, y| x - y),
            Op::Mul => array::zip_broadcast(inputs[0], inputs[1], |x, y| x * y),
            Op::Div => array::zip_broadcast(inputs[0], inputs[1], |x, y| x / y),
            Op::Neg => unary(&|x| -x),
            Op::Scale(c) => unary(&|x| c * x),
            Op::AddScalar(c) => unary(&|x| x + c),
            Op::Pow(c) => unary(&|x| x.powf(*c)),
            Op::Exp => unary(&f64::exp),
            Op::Log(eps) => unary(&|x| (x + eps).ln()),
            Op::Sqrt => unary(&f64::sqrt),
            Op::Tanh => unary(&f64::tanh),
            Op::Sigmoid => unary(&sigmoid),
            Op::Relu => unary(&|x| if x > 0.0 { x } else { 0.0 }),
            Op::LeakyRelu(s) => unary(&|x| if x > 0.0 { x } else { s * x }),
            Op::MatMul => array::matmul(inputs[0], inputs[1]),
            Op::Transpose => array::transpose(inputs[0]),
            Op::SumAll => Ok(Array::scalar(inputs[0].data().iter().sum())),
            Op::SumAxis { axis, keepdim } => array::sum_axis(inputs[0], *axis, *keepdim),
            Op::SumTo(s) => array::sum_to(inputs[0], s),
            Op::BroadcastTo(s) => array::broadcast_to(inputs[0], s),
            Op::Reshape(s) => inputs[0].reshaped(s),
            Op::Softmax => array::softmax_last(inputs[0]),
            Op::Concat { axis } => array::concat(inputs, *axis),
            Op::Slice { axis, start, end } => array::slice(inputs[0], *axis, *start, *end),
            Op::Pad {
                axis,
                before,
                after,
            } => array::pad(inputs[0], *axis, *before, *after),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A recorded input: its value and, when it requires grad, its node.
#[derive(Clone)]
pub(crate) struct Input {
    pub(crate) id: Option<NodeId>,
    pub(crate) value: Rc<Array>,
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<Input>,
    pub(crate) value: Rc<Array>,
}

pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
    pub(crate) recording: bool,
    pub(crate) higher_order: bool,
    pub(crate) generation: u64,
}

/// An append-only record of differentiable operations.
///
/// Cloning a `Tape` yields another handle to the same record. A tape is
/// single-threaded; use one tape per thread.
#[derive(Clone)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape for first-order gradients.
    pub fn new() -> Self {
        Self::build(false)
    }

    /// A tape on which gradients may themselves be differentiated.
    pub fn with_higher_order() -> Self {
        Self::build(true)
    }

    fn build(higher_order: bool) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                recording: true,
                higher_order,
                generation: NEXT_GENERATION.fetch_add(1, Ordering::Relaxed),
            })),
        }
    }

    pub fn higher_order(&self) -> bool {
        self.inner.borrow().higher_order
    }

    /// Unique identifier of this tape.
    pub fn generation(&self) -> u64 {
        self.inner.borrow().generation
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// A trainable leaf holding `value`.
    pub fn leaf(&self, value: Array) -> Tensor {
        let value = Rc::new(value);
        let id = self.push(Op::Leaf, Vec::new(), value.clone());
        Tensor::tracked(value, self.clone(), id)
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<Input>, value: Rc<Array>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { op, inputs, value });
        inner.nodes.len() - 1
    }

    pub(crate) fn recording(&self) -> bool {
        self.inner.borrow().recording
    }

    fn set_recording(&self, on: bool) -> bool {
        std::mem::replace(&mut self.inner.borrow_mut().recording, on)
    }

    /// Operation name of every node, in order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.inner.borrow().nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Number of nodes that take node `id` as a direct input.
    pub fn consumers(&self, id: NodeId) -> usize {
        self.inner
            .borrow()
            .nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i.id == Some(id)))
            .count()
    }

    /// Recomputes every node from its inputs' stored values and reports
    /// whether each result is bitwise identical to what was recorded.
    pub fn replay_matches(&self) -> Result<bool> {
        let inner = self.inner.borrow();
        for node in &inner.nodes {
            if node.op == Op::Leaf {
                continue;
            }
            let ins: Vec<&Array> = node.inputs.iter().map(|i| i.value.as_ref()).collect();
            let again = node.op.forward(&ins)?;
            let same = again.shape() == node.value.shape()
                && again
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Gradients of the scalar `output` with respect to `wrt`.
    ///
    /// With `higher_order` set, the reverse sweep is itself recorded and the
    /// returned gradients can be differentiated again. Entries are `None`
    /// when the output does not depend on that tensor.
    pub fn grad(
        &self,
        output: &Tensor,
        wrt: &[&Tensor],
        higher_order: bool,
    ) -> Result<Vec<Option<Tensor>>> {
        let targets: Vec<Option<NodeId>> = wrt
            .iter()
            .map(|t| t.node_on(self))
            .collect::<Result<_>>()?;
        let found = self.sweep(output, Some(&targets), higher_order)?;
        Ok(targets
            .iter()
            .map(|t| t.and_then(|id| found.get(&id).cloned()))
            .collect())
    }

    /// Reverse sweep from a scalar. With `targets == None` every leaf
    /// reached receives a gradient.
    pub(crate) fn sweep(
        &self,
        output: &Tensor,
        targets: Option<&[Option<NodeId>]>,
        higher_order: bool,
    ) -> Result<HashMap<NodeId, Tensor>> {
        let out_id = output
            .node_on(self)?
            .ok_or_else(|| Error::Usage("backward from a tensor that is not on a tape".into()))?;
        if output.value().len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                output.shape()
            )));
        }
        if higher_order && !self.higher_order() {
            return Err(Error::Usage(
                "higher-order gradients requested on a first-order tape".into(),
            ));
        }

        let n = out_id + 1;
        // needed[i]: node i lies on a path towards a requested gradient
        let (needed, is_target) = {
            let inner = self.inner.borrow();
            let mut is_target = vec![false; n];
            let mut needed = vec![false; n];
            match targets {
                Some(ts) => {
                    for id in ts.iter().flatten() {
                        if *id < n {
                            is_target[*id] = true;
                        }
                    }
                    for i in 0..n {
                        needed[i] = is_target[i]
                            || inner.nodes[i]
                                .inputs
                                .iter()
                                .any(|inp| inp.id.is_some_and(|p| needed[p]));
                    }
                }
                None => {
                    for i in 0..n {
                        is_target[i] = inner.nodes[i].op == Op::Leaf;
                        needed[i] = true;
                    }
                }
            }
            (needed, is_target)
        };

        let previous = self.set_recording(higher_order);
        let result = self.sweep_inner(output, out_id, &needed, &is_target);
        self.set_recording(previous);
        result
    }

    fn sweep_inner(
        &self,
        output: &Tensor,
        out_id: NodeId,
        needed: &[bool],
        is_target: &[bool],
    ) -> Result<HashMap<NodeId, Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; out_id + 1];
        grads[out_id] = Some(Tensor::constant(Array::full(output.shape(), 1.0)));
        let mut found = HashMap::new();

        for id in (0..=out_id).rev() {
            if !needed[id] {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if is_target[id] {
                found.insert(id, g.clone());
            }
            let (op, inputs, value) = {
                let inner = self.inner.borrow();
                let node = &inner.nodes[id];
                (node.op.clone(), node.inputs.clone(), node.value.clone())
            };
            if op == Op::Leaf {
                continue;
            }
            let need: Vec<bool> = inputs
                .iter()
                .map(|i| i.id.is_some_and(|p| needed[p]))
                .collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let handles: Vec<Tensor> = inputs
                .iter()
                .map(|i| match i.id {
                    Some(p) => Tensor::tracked(i.value.clone(), self.clone(), p),
                    None => Tensor::from_rc(i.value.clone()),
                })
                .collect();
            let out = Tensor::tracked(value, self.clone(), id);
            let parts = vjp(&op, &handles, &out, &g, &need)?;
            for ((inp, part), want) in inputs.iter().zip(parts).zip(&need) {
                let (Some(p), Some(part), true) = (inp.id, part, *want) else {
                    continue;
                };
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&part)?,
                    None => part,
                });
            }
        }
        Ok(found)
    }
}

/// Vector-Jacobian products. Returns one optional gradient per input.
fn vjp(op: &Op, x: &[Tensor], out: &Tensor, g: &Tensor, need: &[bool]) -> Result<Vec<Option<Tensor>>> {
    let a = &x[0];
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    let two = |ga: Option<Result<Tensor>>, gb: Option<Result<Tensor>>| -> Result<Vec<Option<Tensor>>> {
        Ok(vec![ga.transpose()?, gb.transpose()?])
    };
    let when = |i: usize, f: &dyn Fn() -> Result<Tensor>| need[i].then(f);

    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => two(
            when(0, &|| g.sum_to(a.shape())),
            when(1, &|| g.sum_to(x[1].shape())),
        ),
        Op::Sub => two(
            when(0, &|| g.sum_to(a.shape())),
            when(1, &|| g.neg().sum_to(x[1].shape())),
        ),
        Op::Mul => two(
            when(0, &|| g.mul(&x[1])?.sum_to(a.shape())),
            when(1, &|| g.mul(a)?.sum_to(x[1].shape())),
        ),
        Op::Div => two(
            when(0, &|| g.div(&x[1])?.sum_to(a.shape())),
            when(1, &|| g.mul(out)?.div(&x[1])?.neg().sum_to(x[1].shape())),
        ),
        Op::Neg => one(Ok(g.neg())),
        Op::Scale(c) => one(Ok(g.scale(*c))),
        Op::AddScalar(_) => one(Ok(g.clone())),
        Op::Pow(c) => one(g.mul(&a.powf(c - 1.0).scale(*c))),
        Op::Exp => one(g.mul(out)),
        Op::Log(eps) => one(g.div(&a.add_scalar(*eps))),
        Op::Sqrt => one(g.div(&out.scale(2.0))),
        Op::Tanh => one(g.mul(&out.mul(out)?.neg().add_scalar(1.0))),
        Op::Sigmoid => one(g.mul(&out.mul(&out.neg().add_scalar(1.0))?)),
        Op::Relu => {
            let mask = a.value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            one(g.mul(&Tensor::constant(mask)))
        }
        Op::LeakyRelu(s) => {
            let mask = a.value().map(|v| if v > 0.0 { 1.0 } else { *s });
            one(g.mul(&Tensor::constant(mask)))
        }
        Op::MatMul => two(
            when(0, &|| g.matmul(&x[1].transpose()?)),
            when(1, &|| a.transpose()?.matmul(g)),
        ),
        Op::Transpose => one(g.transpose()),
        Op::SumAll => one(g.broadcast_to(a.shape())),
        Op::SumAxis { axis, keepdim } => {
            let g = if *keepdim {
                g.clone()
            } else {
                let mut s = a.shape().to_vec();
                s[*axis] = 1;
                g.reshape(&s)?
            };
            one(g.broadcast_to(a.shape()))
        }
        Op::SumTo(_) => one(g.broadcast_to(a.shape())),
        Op::BroadcastTo(_) => one(g.sum_to(a.shape())),
        Op::Reshape(_) => one(g.reshape(a.shape())),
        Op::Softmax => {
            let last = out.shape().len() - 1;
            let dot = g.mul(out)?.sum_axis(last, true)?;
            one(out.mul(&g.sub(&dot)?))
        }
        Op::Concat { axis } => {
            let mut start = 0;
            let mut parts = Vec::with_capacity(x.len());
            for (i, t) in x.iter().enumerate() {
                let len = t.shape()[*axis];
                parts.push(if need[i] {
                    Some(g.slice(*axis, start, start + len)?)
                } else {
                    None
                });
                start += len;
            }
            Ok(parts)
        }
        Op::Slice { axis, start, end } => {
            let total = a.shape()[*axis];
            one(g.pad(*axis, *start, total - end))
        }
        Op::Pad { axis, before, .. } => {
            let len = a.shape()[*axis];
            one(g.slice(*axis, *before, before + len))
        }
    }
}
