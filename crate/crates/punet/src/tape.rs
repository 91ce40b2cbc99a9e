//! Reverse-mode automatic differentiation on a per-thread tape.
//!
//! Every differentiable operation pushes a node holding its output value and
//! a backward closure. [`Tape::backward`] walks the nodes once in reverse
//! execution order, accumulating gradients additively when an output feeds
//! multiple consumers, and finally writes leaf gradients into bound
//! [`Parameter`]s.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A trainable value: current tensor plus accumulated gradient.
///
/// Parameters are shared between the model that owns them and the tapes that
/// record forward passes over them; gradients accumulate across backward
/// calls until [`Parameter::zero_grad`].
#[derive(Debug)]
pub struct Parameter<E: Scalar> {
    value: RefCell<Tensor<E>>,
    grad: RefCell<Option<Tensor<E>>>,
}

impl<E: Scalar> Parameter<E> {
    pub fn new(value: Tensor<E>) -> Rc<Self> {
        Rc::new(Self {
            value: RefCell::new(value),
            grad: RefCell::new(None),
        })
    }

    pub fn value(&self) -> Tensor<E> {
        self.value.borrow().clone()
    }

    pub fn set_value(&self, value: Tensor<E>) {
        *self.value.borrow_mut() = value;
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value.borrow().numel()
    }

    pub fn grad(&self) -> Option<Tensor<E>> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    /// Overwrites the gradient buffer (used by gradient clipping and tests).
    pub fn set_grad(&self, g: Tensor<E>) {
        *self.grad.borrow_mut() = Some(g);
    }

    fn accumulate_grad(&self, g: &Tensor<E>) -> Result<()> {
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.add_assign(g),
            None => {
                *slot = Some(g.clone());
                Ok(())
            }
        }
    }
}

/// Gradient contributions a backward closure hands back: pairs of
/// (input node id, gradient w.r.t. that input).
pub type GradContribs<E> = Vec<(usize, Tensor<E>)>;

type BackwardFn<E> = Box<dyn Fn(&Tensor<E>) -> GradContribs<E>>;

struct Node<E: Scalar> {
    op: OpKind,
    value: Tensor<E>,
    requires_grad: bool,
    grad: Option<Tensor<E>>,
    backward: Option<BackwardFn<E>>,
    param: Option<Rc<Parameter<E>>>,
}

struct TapeInner<E: Scalar> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

/// Recorded computation for one forward pass.
pub struct Tape<E: Scalar> {
    inner: RefCell<TapeInner<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a non-differentiable input (e.g. a data batch).
    pub fn input(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(OpKind::Leaf, value, false, None, None)
    }

    /// Records a differentiable leaf not tied to a parameter; its gradient is
    /// readable through [`Var::grad`] after backward.
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(OpKind::Leaf, value, true, None, None)
    }

    /// Records a leaf bound to `param`; backward accumulates into the
    /// parameter's gradient buffer.
    pub fn param(&self, param: &Rc<Parameter<E>>) -> Var<'_, E> {
        self.push(OpKind::Leaf, param.value(), true, None, Some(Rc::clone(param)))
    }

    pub(crate) fn push(
        &self,
        op: OpKind,
        value: Tensor<E>,
        requires_grad: bool,
        backward: Option<BackwardFn<E>>,
        param: Option<Rc<Parameter<E>>>,
    ) -> Var<'_, E> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
            backward: if requires_grad { backward } else { None },
            param,
        });
        Var { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<E> {
        self.inner.borrow().nodes[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Operation kinds in execution order (used by graph audits).
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.inner.borrow().nodes.iter().map(|n| n.op).collect()
    }

    /// Runs reverse-mode accumulation from a scalar loss.
    ///
    /// Every reachable `requires_grad` node receives its gradient; leaves
    /// bound to parameters have it added to the parameter buffer. A tape can
    /// be consumed only once.
    pub fn backward(&self, loss: Var<'_, E>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Graph("loss belongs to a different tape".into()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Graph("tape already consumed by backward".into()));
        }
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                inner.nodes[loss.id].value.shape()
            )));
        }
        inner.consumed = true;

        let seed_shape = inner.nodes[loss.id].value.shape().to_vec();
        inner.nodes[loss.id].grad = Some(Tensor::ones(&seed_shape));

        for i in (0..=loss.id).rev() {
            if inner.nodes[i].grad.is_none() || !inner.nodes[i].requires_grad {
                continue;
            }
            let Some(backward) = inner.nodes[i].backward.take() else {
                continue;
            };
            let grad = inner.nodes[i].grad.clone().expect("checked above");
            for (j, contrib) in backward(&grad) {
                debug_assert!(j < i, "backward contribution must target an earlier node");
                let node = &mut inner.nodes[j];
                if !node.requires_grad {
                    continue;
                }
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&contrib)?,
                    None => node.grad = Some(contrib),
                }
            }
        }

        for node in inner.nodes.iter() {
            if let (Some(param), Some(grad)) = (&node.param, &node.grad) {
                param.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    fn grad_of(&self, id: usize) -> Option<Tensor<E>> {
        self.inner.borrow().nodes[id].grad.clone()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, E: Scalar> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<'t, E: Scalar> Var<'t, E> {
    pub fn value(&self) -> Tensor<E> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Gradient accumulated at this node, available after backward.
    pub fn grad(&self) -> Option<Tensor<E>> {
        self.tape.grad_of(self.id)
    }

    pub(crate) fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }
}

pub(crate) fn same_tape<E: Scalar>(a: Var<'_, E>, b: Var<'_, E>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::Graph("operands recorded on different tapes".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn backward_rejects_second_call() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = ops::mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 4.0);
        assert!(matches!(tape.backward(y), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // y = x*x + x*x => dy/dx = 4x
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let a = ops::mul(x, x).unwrap();
        let b = ops::mul(x, x).unwrap();
        let y = ops::add(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(x.grad().unwrap().item(), 12.0);
    }

    #[test]
    fn parameter_grads_accumulate_across_tapes() {
        let p = Parameter::new(Tensor::scalar(5.0f64));
        for _ in 0..2 {
            let tape = Tape::new();
            let v = tape.param(&p);
            let y = ops::mul(v, v).unwrap();
            tape.backward(y).unwrap();
        }
        assert_eq!(p.grad().unwrap().item(), 20.0);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn non_grad_inputs_receive_no_gradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::scalar(2.0));
        let w = tape.leaf(Tensor::scalar(3.0));
        let y = ops::mul(x, w).unwrap();
        tape.backward(y).unwrap();
        assert!(x.grad().is_none());
        assert_eq!(w.grad().unwrap().item(), 2.0);
    }
}
