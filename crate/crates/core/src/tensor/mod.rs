//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional value; operations build a DAG of
//! nodes, and [`Tensor::backward`] walks it once in reverse topological order,
//! accumulating gradients into every reachable grad-tracked leaf. Gradients
//! accumulate across backward calls; [`Tensor::zero_grad`] resets them.
//!
//! Parameter data lives behind interior mutability so the optimizer can update
//! it in place between steps; a graph is always consumed (backward + step)
//! before its leaves are mutated.

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod ops;
pub mod optim;

pub use ops::row_softmax;
pub use optim::{check_finite, ensure_grads, zero_grads, Adam, Parameter};

/// Errors surfaced by tensor construction, operations, and the optimizer.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} for input of {len} elements")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("parameter '{name}' has no gradient (was backward called?)")]
    MissingGradient { name: String },
    #[error("non-finite value in '{name}'")]
    NonFinite { name: String },
}

type Result<T> = std::result::Result<T, TensorError>;

/// Backward rule of one node: receives (output grad, output data) and
/// accumulates into the parents captured by the closure.
type BackwardFn = Box<dyn Fn(&[f64], &[f64])>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Node {
    id: u64,
    op: &'static str,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A dense n-dimensional value, optionally tracked for gradients.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("op", &self.inner.op)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// A leaf holding `data` with the given shape.
    ///
    /// Panics if `product(shape) != data.len()`; that is a programming error,
    /// not a runtime condition.
    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} does not match {} elements",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                op: "leaf",
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// A constant (not grad-tracked) leaf.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Tensor::leaf(data, shape, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![value], &[1])
    }

    /// Internal constructor for op outputs. Parents and the backward rule are
    /// dropped when no parent tracks gradients, pruning the graph.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                op,
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Operation tag of the node that produced this tensor ("leaf" for leaves).
    pub fn op(&self) -> &'static str {
        self.inner.op
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Borrow the underlying data.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    /// Replace the data in place (optimizer updates). Length must match.
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    pub(crate) fn data_mut(&self) -> std::cell::RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Drop the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Accumulate into this tensor's gradient buffer, allocating zeros on
    /// first use. No-op for tensors that do not track gradients.
    pub(crate) fn accumulate_grad(&self, f: impl FnOnce(&mut [f64])) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let g = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        f(g);
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Every grad-tracked tensor reachable from the loss receives (an
    /// accumulation of) its gradient; each graph node is visited exactly once.
    /// Calling backward twice without `zero_grad` accumulates both sweeps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.inner.requires_grad {
            return Ok(()); // loss does not depend on any tracked tensor
        }
        let order = self.topo_order();
        // Leaves accumulate across sweeps; interior node grads are
        // per-sweep scratch and must start clean.
        for node in &order {
            if !node.inner.parents.is_empty() {
                *node.inner.grad.borrow_mut() = None;
            }
        }
        self.accumulate_grad(|g| g[0] += 1.0);
        for node in order.iter().rev() {
            if let Some(back) = &node.inner.backward {
                let grad = node.inner.grad.borrow();
                if let Some(g) = grad.as_ref() {
                    let data = node.inner.data.borrow();
                    back(g, &data);
                }
            }
        }
        Ok(())
    }

    /// Post-order over the ancestor DAG (parents before children).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        visited.insert(self.id());
        stack.push((self.clone(), 0));
        while let Some((node, next_parent)) = stack.pop() {
            if next_parent < node.inner.parents.len() {
                let parent = node.inner.parents[next_parent].clone();
                stack.push((node, next_parent + 1));
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

/// Cosine similarity of two equal-length vectors, clamped to [-1, 1].
///
/// A zero vector on either side yields 0: degenerate pooled vectors occur
/// early in training and must not poison prototype scores.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity length mismatch");
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Deterministic RNG stream derived from a run seed and a purpose tag, so
/// that e.g. weight init and batch shuffling never share a stream.
pub fn seeded_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tag.as_bytes()))
}

/// FNV-1a, used for seed derivation and config hashing.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Sample from N(0, std^2) via Box-Muller.
pub fn sample_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests;
