//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of a forward pass. Each recorded node
//! keeps its value and, when any input requires a gradient, a closure that
//! pushes the node's output gradient back onto its inputs. [`Tape::backward`]
//! replays those closures in reverse insertion order.
//!
//! ```
//! use textspot::autodiff::Tape;
//! use textspot::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec([2], vec![1.0, 2.0]));
//! let y = x.mul(x).sum();
//! let grads = tape.backward(y);
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```
//!
//! Tapes are single-threaded; build one per forward pass.

mod fused;
mod gemm;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

pub use fused::AttentionOutput;
pub use gemm::{gemm, MatRef};
pub use ops::PAD;

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Records the operations of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), true, None)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(Rc::new(value), false, None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&self, value: Rc<Tensor>, requires_grad: bool, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an operation. The closure is dropped when no input needs a
    /// gradient.
    pub(crate) fn push<'t, F>(&'t self, value: Tensor, inputs: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&[f64], &mut GradSink<'_>) + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| {
                debug_assert!(std::ptr::eq(v.tape, self), "mixing tapes");
                nodes[v.id].requires_grad
            })
        };
        let backward: Option<BackwardFn> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.insert(Rc::new(value), requires_grad, backward)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert_eq!(
            output.value().numel(),
            1,
            "backward() needs a scalar output, got shape {:?}",
            output.shape()
        );
        self.backward_with(output, &[1.0])
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, output: Var<'_>, seed: &[f64]) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.len(), nodes[output.id].value.numel());
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(output.id + 1, || None);
        if nodes[output.id].requires_grad {
            grads[output.id] = Some(seed.to_vec());
        }
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let mut sink = GradSink {
                nodes: &nodes,
                grads: &mut grads,
            };
            backward(&grad, &mut sink);
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

/// Accumulates gradients pushed by backward closures.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Vec<f64>>>,
}

impl GradSink<'_> {
    /// Calls `f` with the mutable gradient buffer of node `id`, creating it
    /// zero-filled on first use. Skipped for nodes that need no gradient.
    pub(crate) fn accumulate(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    pub(crate) fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer of `var`, `None` when nothing flowed into it.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var` shaped like its value; zeros when nothing flowed in.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = var.shape();
        match self.get(var) {
            Some(g) => Tensor::from_vec(shape, g.to_vec()),
            None => Tensor::zeros(shape),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Identity in the forward pass; blocks every gradient in the reverse pass.
    pub fn detach(self) -> Var<'t> {
        let value = self.value();
        self.tape.insert(value, false, None)
    }
}
