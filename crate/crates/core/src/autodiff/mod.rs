//! Minimal reverse-mode automatic differentiation.
//!
//! Tensors are reference-counted nodes of a dynamically built graph. Each
//! operation that involves a tensor requiring gradients records its parents
//! and a vector-Jacobian closure; [`Tensor::backward`] walks the graph in
//! reverse topological order. With gradient recording disabled (see
//! [`no_grad`]) intermediate values are freed as soon as they go out of
//! scope, which is what keeps large inference passes within memory.

mod complex;
mod gradcheck;
mod nn;
mod ops;
mod params;
mod real;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use nn::{Activation, ConvSpec};
pub use gradcheck::{grad_check_floored, grad_check_sampled};
pub use params::{AdamW, ParamId, ParamStore, ParamStoreError, MANIFEST_VERSION};
pub(crate) use params::write_atomic;
pub use real::Real;

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is detached: no tensor in its graph requires gradients")]
    Detached,
    #[error("invalid value in {op}: {detail}")]
    InvalidValue { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Shape {
        op,
        detail: detail.into(),
    })
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether operations on this thread currently record gradients.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(prev);
    f()
}

type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Real> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    /// Receives (upstream gradient, forward output) and returns one optional
    /// gradient per parent.
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    grad_fn: Option<GradFn<T>>,
}

/// An n-dimensional real array participating in reverse-mode differentiation.
pub struct Tensor<T: Real> {
    node: Rc<Node<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.name))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, param: Option<ParamId>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                param,
                grad_fn: None,
            }),
        }
    }

    /// A constant tensor (never receives gradients).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(AutodiffError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), false, None))
    }

    /// A leaf tensor that receives gradients.
    pub fn var(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(AutodiffError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), true, None))
    }

    pub(crate) fn param_leaf(data: Vec<T>, shape: Vec<usize>, id: ParamId) -> Self {
        Self::leaf(data, shape, true, Some(id))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::leaf(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![value], vec![1], false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::of(v)).collect(), shape)
    }

    /// Builds the result of an operation, recording the backward closure
    /// only when gradients are enabled and some parent needs them.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[T]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "{name}");
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = track.then(|| GradFn {
            name,
            parents,
            backward: Box::new(backward),
        });
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad: track,
                param: None,
                grad_fn,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.f64()).collect()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn param_id(&self) -> Option<ParamId> {
        self.node.param
    }

    /// Name of the operation that produced this tensor, if it is tracked.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.name)
    }

    /// First element; intended for scalar tensors.
    pub fn item(&self) -> T {
        self.node.data[0]
    }

    /// A constant copy cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.data.clone(), self.node.shape.clone(), false, None)
    }

    /// Reverse-mode gradients of this scalar with respect to every leaf that
    /// requires gradients.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(AutodiffError::Detached);
        }

        // Post-order DFS: parents are emitted before children.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, idx)) = stack.pop() {
            let parents = t.node.grad_fn.as_ref().map(|g| g.parents.as_slice()).unwrap_or(&[]);
            if idx < parents.len() {
                let p = parents[idx].clone();
                stack.push((t, idx + 1));
                if p.requires_grad() && visited.insert(p.id()) {
                    stack.push((p, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: BTreeMap::new(),
        };
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.node.grad_fn {
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g, t.data());
                    debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.name);
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "grad of {} input", gf.name);
                        accumulate(&mut pending, p.id(), pg);
                    }
                }
                None => {
                    if let Some(pid) = t.node.param {
                        match out.params.get_mut(&pid) {
                            Some(acc) => add_assign(acc, &g),
                            None => {
                                out.params.insert(pid, g.clone());
                            }
                        }
                    }
                    out.leaves.insert(t.id(), g);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(map: &mut HashMap<u64, Vec<T>>, id: u64, g: Vec<T>) {
    match map.get_mut(&id) {
        Some(acc) => add_assign(acc, &g),
        None => {
            map.insert(id, g);
        }
    }
}

pub(crate) fn add_assign<T: Real>(acc: &mut [T], g: &[T]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += *b;
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    leaves: HashMap<u64, Vec<T>>,
    params: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// dLoss/dTensor for a leaf tensor, or `None` if the loss does not
    /// depend on it.
    pub fn wrt(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.leaves.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(|v| v.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }
}
