//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every [`Tensor`] produced by an operation keeps a reference to its inputs
//! together with the closure state needed to push gradients back to them.
//! Calling [`Tensor::backward`] on a scalar walks that graph in reverse
//! topological order and collects gradients for parameter leaves into a
//! [`Gradients`] table. Tensors that do not depend on any gradient-tracking
//! leaf never record a graph, so inference is allocation-light.
//!
//! Shape mismatches inside this module are programming errors and panic;
//! user-facing shape validation happens in the model layers above.

mod conv;
mod ops;
mod params;

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

pub use params::{Gradients, ParamGroup, ParamId, ParamStore, Vars};

thread_local! {
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule of one recorded operation.
pub(crate) trait GradFn {
    fn inputs(&self) -> Vec<&Tensor>;
    /// Returns one gradient per input (in `inputs` order). Entries whose
    /// `needs` flag is false may be `None`.
    fn backward(&self, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    id: usize,
    data: Vec<f64>,
    shape: Vec<usize>,
    grad_fn: Option<Box<dyn GradFn>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

impl Drop for Node {
    // Long integration chains make the graph deep; unlink it iteratively so
    // dropping a loss never recurses once per recorded op.
    fn drop(&mut self) {
        let Some(first) = self.grad_fn.take() else {
            return;
        };
        let mut stack = vec![first];
        while let Some(f) = stack.pop() {
            let owned: Vec<Tensor> = f.inputs().into_iter().cloned().collect();
            drop(f);
            for t in owned {
                // Only the last owner takes the subgraph apart.
                if let Ok(mut node) = Rc::try_unwrap(t.0) {
                    if let Some(g) = node.grad_fn.take() {
                        stack.push(g);
                    }
                }
            }
        }
    }
}

/// Reference-counted tensor handle; cloning is cheap and shares storage.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor (never receives gradients).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(Node {
            id: next_id(),
            data,
            shape: shape.to_vec(),
            grad_fn: None,
            param: None,
            requires_grad: false,
        }))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel_of(shape)], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(vec![value; numel_of(shape)], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![value], &[1])
    }

    /// Leaf bound to a parameter slot. Gradients reaching it are reported
    /// under `id` by [`Tensor::backward`].
    pub(crate) fn param_leaf(id: ParamId, data: Vec<f64>, shape: &[usize], track: bool) -> Tensor {
        assert_eq!(data.len(), numel_of(shape));
        Tensor(Rc::new(Node {
            id: next_id(),
            data,
            shape: shape.to_vec(),
            grad_fn: None,
            param: if track { Some(id) } else { None },
            requires_grad: track,
        }))
    }

    /// Leaf that tracks gradients under a caller-chosen parameter id. Used to
    /// differentiate with respect to inputs rather than model weights.
    pub fn variable(id: ParamId, data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::param_leaf(id, data, shape, true)
    }

    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs_require_grad: bool,
        grad_fn: impl FnOnce() -> Box<dyn GradFn>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel_of(&shape));
        let grad_fn = if inputs_require_grad { Some(grad_fn()) } else { None };
        Tensor(Rc::new(Node {
            id: next_id(),
            data,
            shape,
            grad_fn,
            param: None,
            requires_grad: inputs_require_grad,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        if !self.requires_grad() {
            return self.clone();
        }
        Tensor::new(self.0.data.clone(), &self.0.shape)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar. Returns gradients of every
    /// parameter leaf reachable from `self`.
    pub fn backward(&self) -> Gradients {
        assert_eq!(self.numel(), 1, "backward() requires a scalar, got {:?}", self.shape());
        let mut out = Gradients::default();
        if !self.requires_grad() {
            return out;
        }
        let order = self.topological_order();
        let mut pending: std::collections::HashMap<usize, Vec<f64>> =
            std::collections::HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(grad) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(pid) = t.0.param {
                out.accumulate(pid, &grad, 1.0);
                continue;
            }
            let Some(f) = &t.0.grad_fn else { continue };
            let inputs = f.inputs();
            let needs: Vec<bool> = inputs.iter().map(|i| i.requires_grad()).collect();
            let grads = f.backward(&grad, &needs);
            debug_assert_eq!(grads.len(), inputs.len());
            for ((input, g), need) in inputs.iter().zip(grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.len(), input.numel());
                match pending.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        pending.insert(input.id(), g);
                    }
                }
            }
        }
        out
    }

    /// Nodes requiring grad, inputs before consumers.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (tensor, children_pushed)
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(f) = &t.0.grad_fn {
                for input in f.inputs() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
