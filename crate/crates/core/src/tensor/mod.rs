//! A small reverse-mode automatic differentiation engine over dense `f64`
//! tensors.
//!
//! Every backward rule is itself written in terms of differentiable tensor
//! operations, so calling [`grad`] with `create_graph = true` yields
//! gradients that can be differentiated again. The R1 penalty relies on this.
//!
//! Shape errors inside the engine are programming errors and panic, in the
//! same way `ndarray` does. Model-level APIs validate their inputs and return
//! [`crate::Error`].

pub(crate) mod ops;
mod sparse;

pub use sparse::{SparseMap, SparsePair};

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether new operations on this thread record a backward graph.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(enabled)));
    f()
}

/// Runs `f` with graph recording switched on, even inside [`no_grad`].
pub fn enable_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(true, f)
}

/// Runs `f` without recording any backward graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

type BackwardFn = dyn Fn(&[Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>> + Send + Sync;

struct GradFn {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: Box<BackwardFn>,
}

struct Node {
    id: usize,
    data: Arc<Vec<f64>>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

/// Immutable n-dimensional array with an optional backward graph.
///
/// Cloning is cheap: clones share the same node.
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.node.grad_fn.as_ref().map(|g| g.op).unwrap_or("leaf");
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("op", &op)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(data: Arc<Vec<f64>>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data,
                shape,
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// Constant tensor (never requires grad).
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::make(Arc::new(data), shape.to_vec(), false, None)
    }

    /// Trainable leaf tensor.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        Self::make(Arc::new(data), shape.to_vec(), true, None)
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_vec(vec![v; numel(shape)], shape)
    }

    /// Builds the output of an operation. The backward closure receives the
    /// op inputs, the output tensor and the incoming gradient, and returns one
    /// optional gradient per input.
    pub(crate) fn from_op<F>(data: Vec<f64>, shape: Vec<usize>, op: &'static str, inputs: Vec<Tensor>, backward: F) -> Self
    where
        F: Fn(&[Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>> + Send + Sync + 'static,
    {
        Self::from_op_shared(Arc::new(data), shape, op, inputs, backward)
    }

    pub(crate) fn from_op_shared<F>(
        data: Arc<Vec<f64>>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: Vec<Tensor>,
        backward: F,
    ) -> Self
    where
        F: Fn(&[Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>> + Send + Sync + 'static,
    {
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let grad_fn = track.then(|| GradFn { op, inputs, backward: Box::new(backward) });
        Self::make(data, shape, track, grad_fn)
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.node.data)
    }

    pub fn id(&self) -> usize {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.node.shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::make(self.shared_data(), self.shape().to_vec(), false, None)
    }

    /// Same values as a fresh leaf that requires grad.
    pub fn detach_requiring_grad(&self) -> Tensor {
        Self::make(self.shared_data(), self.shape().to_vec(), true, None)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

/// Gradients of a scalar `output` with respect to each tensor in `wrt`.
///
/// Tensors that `output` does not depend on receive zeros. With
/// `create_graph`, the returned gradients carry their own backward graph.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.numel(), 1, "grad() needs a scalar output, got shape {:?}", output.shape());
    grad_with_seed(output, &Tensor::ones(output.shape()), wrt, create_graph)
}

/// Vector-Jacobian product: gradients of `<seed, output>` with respect to `wrt`.
pub fn grad_with_seed(output: &Tensor, seed: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Vec<Tensor> {
    assert_eq!(output.shape(), seed.shape(), "seed shape must match output shape");
    let mut result: Vec<Option<Tensor>> = vec![None; wrt.len()];
    if output.requires_grad() {
        let order = topo_order(output);
        let mut wanted: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, t) in wrt.iter().enumerate() {
            wanted.entry(t.id()).or_default().push(i);
        }
        let mut grads: HashMap<usize, Tensor> = HashMap::new();
        grads.insert(output.id(), seed.clone());
        with_grad_mode(create_graph, || {
            for node in order.iter().rev() {
                let Some(g) = grads.remove(&node.id()) else { continue };
                if let Some(slots) = wanted.get(&node.id()) {
                    for &s in slots {
                        result[s] = Some(g.clone());
                    }
                }
                let Some(gf) = node.node.grad_fn.as_ref() else { continue };
                let input_grads = (gf.backward)(&gf.inputs, node, &g);
                debug_assert_eq!(input_grads.len(), gf.inputs.len(), "backward arity of {}", gf.op);
                for (inp, gi) in gf.inputs.iter().zip(input_grads) {
                    let Some(gi) = gi else { continue };
                    if !inp.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(gi.shape(), inp.shape(), "gradient shape from {}", gf.op);
                    let acc = match grads.remove(&inp.id()) {
                        Some(prev) => prev.add(&gi),
                        None => gi,
                    };
                    grads.insert(inp.id(), acc);
                }
            }
        });
    }
    result
        .into_iter()
        .zip(wrt)
        .map(|(g, t)| g.unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Nodes reachable from `root` through grad-requiring edges, in post-order.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((t, child)) = stack.pop() {
        let inputs = t.node.grad_fn.as_ref().map(|g| g.inputs.as_slice()).unwrap_or(&[]);
        if child < inputs.len() {
            let next = inputs[child].clone();
            stack.push((t, child + 1));
            if next.requires_grad() && visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}
