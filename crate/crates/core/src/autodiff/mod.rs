//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Nodes are
//! appended in creation order, which is a topological order, so the backward
//! sweep simply walks the tape from the loss towards the leaves.
//!
//! ```
//! use ospatialnet::autodiff::Graph;
//! use ospatialnet::tensor::Tensor;
//!
//! let g = Graph::<f64>::new();
//! let x = g.leaf(Tensor::scalar(3.0), true);
//! let loss = x.mul(&x).unwrap();
//! let grads = g.backward(&loss).unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[6.0]);
//! ```
//!
//! Operations with hand-written backward passes (fused sequence kernels,
//! the inverse STFT, the loss) plug in through [`Var::custom`].

pub mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{contract, Result};
use crate::tensor::{Float, Tensor};

pub use ops::{layer_norm_rows, sigmoid, silu, silu_grad, softplus, ConvPadding};

/// Backward closure of one node: receives the gradient of the node's output
/// and pushes gradients into its inputs.
pub type BackwardFn<T> = Box<dyn FnOnce(&[T], &mut GradSink<T>)>;

struct Node<T> {
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
    len: usize,
}

struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Clone)]
pub struct Graph<T: Float> {
    tape: Rc<RefCell<Tape<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            tape: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                grad_enabled: true,
            })),
        }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        let g = Self::new();
        g.tape.borrow_mut().grad_enabled = false;
        g
    }

    pub fn grad_enabled(&self) -> bool {
        self.tape.borrow().grad_enabled
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.leaf_rc(Arc::new(value), requires_grad)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    pub(crate) fn leaf_rc(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<T> {
        let mut tape = self.tape.borrow_mut();
        let requires_grad = requires_grad && tape.grad_enabled;
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            requires_grad,
            backward: None,
            len: value.numel(),
        });
        Var {
            id,
            value,
            requires_grad,
            tape: self.tape.clone(),
        }
    }

    /// Runs the backward sweep from a scalar `loss`.
    ///
    /// The recorded closures are consumed: a graph can be differentiated once,
    /// and a second call yields no gradients for nodes recorded before it.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if !Rc::ptr_eq(&self.tape, &loss.tape) {
            return Err(contract("loss belongs to a different graph"));
        }
        if loss.value.numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let mut tape = self.tape.borrow_mut();
        let nodes = &mut tape.nodes;
        let mut sink = GradSink {
            grads: (0..nodes.len()).map(|_| None).collect(),
            requires: nodes.iter().map(|n| n.requires_grad).collect(),
            lens: nodes.iter().map(|n| n.len).collect(),
        };
        if loss.requires_grad {
            sink.grads[loss.id] = Some(vec![T::one()]);
        }
        let mut leaf = vec![false; nodes.len()];
        for id in (0..=loss.id).rev() {
            let node = &mut nodes[id];
            match node.backward.take() {
                None => leaf[id] = node.requires_grad,
                Some(f) => {
                    if let Some(g) = sink.grads[id].take() {
                        f(&g, &mut sink);
                    }
                }
            }
        }
        let grads = sink
            .grads
            .into_iter()
            .zip(leaf)
            .map(|(g, is_leaf)| if is_leaf { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<T> {
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    lens: Vec<usize>,
}

impl<T: Float> GradSink<T> {
    pub fn wants(&self, id: usize) -> bool {
        self.requires[id]
    }

    /// Mutable gradient buffer of node `id`, zero-initialized on first use.
    /// `None` when the node does not require a gradient.
    pub fn slot(&mut self, id: usize) -> Option<&mut [T]> {
        if !self.requires[id] {
            return None;
        }
        let len = self.lens[id];
        Some(self.grads[id].get_or_insert_with(|| vec![T::zero(); len]))
    }

    pub fn add(&mut self, id: usize, g: &[T]) {
        if let Some(slot) = self.slot(id) {
            for (a, b) in slot.iter_mut().zip(g) {
                *a += *b;
            }
        }
    }

    pub fn add_owned(&mut self, id: usize, g: Vec<T>) {
        if !self.requires[id] {
            return;
        }
        debug_assert_eq!(g.len(), self.lens[id]);
        match &mut self.grads[id] {
            Some(slot) => {
                for (a, b) in slot.iter_mut().zip(g) {
                    *a += b;
                }
            }
            empty => *empty = Some(g),
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads
            .get(var.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(var.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Moves the gradient of `var` out of the store.
    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads
            .get_mut(var.id)
            .and_then(|g| g.take())
            .map(|g| Tensor::new(var.value.shape().to_vec(), g).expect("grad shape"))
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone)]
pub struct Var<T: Float> {
    id: usize,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    tape: Rc<RefCell<Tape<T>>>,
}

impl<T: Float> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<T: Float> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn graph(&self) -> Graph<T> {
        Graph {
            tape: self.tape.clone(),
        }
    }

    /// Records a new node computed from `inputs`.
    ///
    /// `backward` is only kept when at least one input requires a gradient;
    /// it receives the output gradient and must push input gradients into
    /// the sink using the inputs' [`Var::id`]s.
    pub fn custom(
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: impl FnOnce(&[T], &mut GradSink<T>) + 'static,
    ) -> Var<T> {
        let tape = inputs.first().expect("custom op needs at least one input").tape.clone();
        debug_assert!(inputs.iter().all(|v| Rc::ptr_eq(&v.tape, &tape)));
        let requires_grad = inputs.iter().any(|v| v.requires_grad);
        let mut t = tape.borrow_mut();
        let id = t.nodes.len();
        t.nodes.push(Node {
            requires_grad,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            len: value.numel(),
        });
        drop(t);
        Var {
            id,
            value: Arc::new(value),
            requires_grad,
            tape,
        }
    }

    /// True when any of `vars` needs a gradient; ops use this to skip saving
    /// activations in inference graphs.
    pub fn any_requires_grad(vars: &[&Var<T>]) -> bool {
        vars.iter().any(|v| v.requires_grad)
    }
}
