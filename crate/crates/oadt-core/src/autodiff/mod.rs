//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Every operation appends a node holding its output value and a backward
//! closure. The closure captures cheap `Tensor` clones of whatever it needs
//! (inputs, sometimes the output), so replay never borrows the tape itself.
//! `backward` consumes the tape, walks nodes in reverse, and accumulates
//! vector-Jacobian products into per-node gradient slots; a value consumed by
//! several later ops therefore receives the sum of its downstream gradients.
//!
//! A tape is confined to one logical thread and is built, replayed once, and
//! dropped. Graph structure is implicit in the recording order: inputs always
//! precede the ops that consume them.

mod elementwise;
mod linalg;
mod reduce;
mod shape_ops;
mod structured;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackFn<E> = Box<dyn Fn(&[E], &mut GradSink<E>)>;

struct Node<E: Scalar> {
    value: Tensor<E>,
    requires_grad: bool,
    back: Option<BackFn<E>>,
}

pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

/// Mutable gradient accumulator passed to backward closures.
pub struct GradSink<E: Scalar> {
    slots: Vec<Option<Vec<E>>>,
    requires: Vec<bool>,
}

impl<E: Scalar> GradSink<E> {
    /// Gradient buffer for `v`, zero-initialized on first touch. `None` when
    /// nothing upstream of `v` requires a gradient, letting closures skip the
    /// work entirely.
    pub fn slot(&mut self, v: Var, numel: usize) -> Option<&mut [E]> {
        if !self.requires[v.0] {
            return None;
        }
        let s = &mut self.slots[v.0];
        if s.is_none() {
            *s = Some(vec![E::zero(); numel]);
        }
        s.as_deref_mut()
    }

    pub fn accumulate(&mut self, v: Var, contrib: &[E]) {
        if let Some(slot) = self.slot(v, contrib.len()) {
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s = *s + *c;
            }
        }
    }
}

/// Gradients by `Var`, returned from [`Tape::backward`].
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input. Gradients are tracked only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Record a value that never needs a gradient (targets, masks, tables).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, back: Option<BackFn<E>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an op node. `requires_grad` is inherited from the inputs.
    fn push_op(&mut self, value: Tensor<E>, inputs: &[Var], back: BackFn<E>) -> Var {
        for v in inputs {
            debug_assert!(v.0 < self.nodes.len(), "Var from a different tape");
        }
        let requires = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let back = if requires { Some(back) } else { None };
        self.push(value, requires, back)
    }

    /// Reverse sweep from a scalar root. Consumes the tape; each node's
    /// backward closure runs at most once.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<E>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let requires: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let mut sink = GradSink {
            slots: vec![None; self.nodes.len()],
            requires,
        };
        if sink.requires[loss.0] {
            sink.slots[loss.0] = Some(vec![E::one()]);
        }
        for i in (0..=loss.0).rev() {
            if sink.slots[i].is_none() {
                continue;
            }
            if let Some(back) = self.nodes[i].back.take() {
                // Clone the upstream gradient out so the closure can borrow
                // the sink mutably while reading it.
                let g = sink.slots[i].clone().expect("checked above");
                back(&g, &mut sink);
            }
        }
        let grads = sink
            .slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.map(|buf| {
                    Tensor::from_vec(self.nodes[i].value.shape().to_vec(), buf)
                        .expect("gradient shape matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}
