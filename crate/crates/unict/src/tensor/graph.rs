//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation of one forward pass in topological
//! order. [`Graph::backward`] walks the tape once in reverse, handing each
//! node's upstream gradient to the closure the op registered at record time.

use super::counter::OpCounter;
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    back: Option<BackFn<T>>,
}

/// Accumulates gradient contributions flowing to earlier nodes.
pub struct GradSink<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradSink<T> {
    pub fn add(&mut self, v: Var, g: Tensor<T>) {
        match &mut self.slots[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape(), "gradient shape drift");
                let dst = acc.data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += *s;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradients of one backward pass, indexed by the forward [`Var`]s.
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    counter: OpCounter,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            counter: OpCounter::new(),
            check_finite: true,
        }
    }

    /// Disable the per-op finiteness scan (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> &OpCounter {
        &self.counter
    }

    pub(crate) fn count(&mut self, op: &'static str, macs: u64) {
        self.counter.add(op, macs);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert an input node. Gradients flow to it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            back: None,
        });
        Var(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Record an op result. `back` may be `None` for ops whose inputs need
    /// no gradient; it is dropped anyway when `requires_grad` is false.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        requires_grad: bool,
        back: Option<BackFn<T>>,
    ) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            back: if requires_grad { back } else { None },
        });
        Ok(Var(id))
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar output; visits each node exactly once.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out_shape = self.nodes[output.0].value.shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: out_shape.to_vec(),
            });
        }
        let mut sink = GradSink {
            slots: vec![None; self.nodes.len()],
        };
        sink.slots[output.0] = Some(Tensor::ones(out_shape));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if let (Some(back), Some(grad)) = (&node.back, sink.slots[i].clone()) {
                back(&grad, &mut sink);
            }
        }
        Ok(Gradients { slots: sink.slots })
    }
}
