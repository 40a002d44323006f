//! Dense CPU tensors with reverse-mode automatic differentiation.
//!
//! Shapes are row-major. A tensor is an `Rc` handle; clones share storage.
//! Ops record a backward closure on their result, so a forward pass builds a
//! DAG rooted at the loss. `backward()` walks that DAG once in reverse
//! topological order, accumulates gradients for interior nodes in a transient
//! store keyed by node identity, and folds the final contributions into the
//! persistent `.grad` buffers of parameter leaves only. Repeated backward
//! calls therefore accumulate into parameter gradients without double
//! counting interior edges.
//!
//! Invariants:
//! - shapes are immutable after construction;
//! - a parameter's `.grad`, when present, has exactly the parameter's shape;
//! - forward ops on finite inputs produce finite outputs (checked in debug
//!   builds; NaN/Inf is a bug, not a value).

pub mod nn;
pub mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::scalar::Scalar;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording switched off on this thread.
/// Ops built inside produce plain tensors with no backward node.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<T> = Box<dyn Fn(&[T], &mut GradSink<T>)>;

struct Node<T: Scalar> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    is_param: bool,
    node: Option<Node<T>>,
}

impl<T: Scalar> Drop for Inner<T> {
    // Graphs from long sequences are deep; the default recursive Rc drop
    // would blow the stack. Drain iteratively instead. Relies on backward
    // closures capturing only tensors listed in their node's parents (plus
    // non-tensor data): parents are parked in `queue` before the closure
    // drops, so a closure drop can never cascade.
    fn drop(&mut self) {
        let Some(first) = self.node.take() else { return };
        let mut pending: Vec<Node<T>> = vec![first];
        let mut queue: Vec<Tensor<T>> = Vec::new();
        while let Some(node) = pending.pop() {
            let Node { parents, backward } = node;
            queue.extend(parents);
            drop(backward);
            while let Some(mut t) = queue.pop() {
                if let Some(inner) = Rc::get_mut(&mut t.inner) {
                    if let Some(n) = inner.node.take() {
                        pending.push(n);
                    }
                }
            }
        }
    }
}

pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape())
    }
}

/// Fill policy for fresh tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillMode {
    Zeros,
    Ones,
    /// Uniform on [0, 1).
    Uniform,
    /// Standard normal.
    Normal,
}

impl<T: Scalar> Tensor<T> {
    fn new_inner(data: Vec<T>, shape: Vec<usize>, is_param: bool, node: Option<Node<T>>) -> Self {
        // Non-finite values are legal here; ops that cannot tolerate them
        // (the selective scan, losses) gate their own inputs.
        debug_assert_eq!(data.len(), shape.iter().product::<usize>(), "data/shape mismatch");
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                is_param,
                node,
            }),
        }
    }

    /// Plain (non-parameter) tensor from raw data.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                "from_vec",
                format!("{} values cannot fill shape {shape:?}", data.len()),
            ));
        }
        Ok(Self::new_inner(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf: `backward()` accumulates into its `.grad`.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                "param",
                format!("{} values cannot fill shape {shape:?}", data.len()),
            ));
        }
        Ok(Self::new_inner(data, shape.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_inner(vec![T::zero(); shape.iter().product()], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new_inner(vec![T::one(); shape.iter().product()], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new_inner(vec![value; shape.iter().product()], shape.to_vec(), false, None)
    }

    /// Fresh tensor drawn according to `mode`. Random modes require an rng.
    pub fn fill(shape: &[usize], mode: FillMode, rng: Option<&mut SplitRng>) -> Result<Self> {
        let n: usize = shape.iter().product();
        let data = match (mode, rng) {
            (FillMode::Zeros, _) => vec![T::zero(); n],
            (FillMode::Ones, _) => vec![T::one(); n],
            (FillMode::Uniform, Some(r)) => (0..n).map(|_| r.uniform(0.0, 1.0)).collect(),
            (FillMode::Normal, Some(r)) => (0..n).map(|_| r.normal()).collect(),
            (FillMode::Uniform | FillMode::Normal, None) => {
                return Err(Error::domain("fill", "random fill mode needs an rng"));
            }
        };
        Ok(Self::new_inner(data, shape.to_vec(), false, None))
    }

    pub fn scalar(value: T) -> Self {
        Self::new_inner(vec![value], vec![1], false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Borrow of the underlying values. Hold briefly; ops re-borrow.
    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn is_param(&self) -> bool {
        self.inner.is_param
    }

    /// True when this tensor participates in gradient flow, either as a
    /// trainable leaf or as an op result recorded on the tape.
    pub fn tracks_grad(&self) -> bool {
        self.inner.is_param || self.inner.node.is_some()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place overwrite of the values; shape is fixed. For optimizer steps
    /// and checkpoint loads, never for tensors inside a live graph.
    pub fn set_data(&self, values: &[T]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub(crate) fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    /// Copy of the values detached from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Self::new_inner(self.to_vec(), self.inner.shape.clone(), false, None)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.inner) as *const () as usize
    }

    /// Reverse-mode sweep from a scalar. Parameter leaves reachable from this
    /// tensor receive (accumulate) gradients; interior results do not retain
    /// theirs.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got {:?}", self.shape()),
            ));
        }

        // Post-order DFS over op nodes; leaves collected on the side.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut leaves: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = Vec::new();

        visited.insert(self.key());
        stack.push((self.clone(), 0));
        while let Some((t, idx)) = stack.last_mut() {
            match &t.inner.node {
                Some(node) if *idx < node.parents.len() => {
                    let p = node.parents[*idx].clone();
                    *idx += 1;
                    if visited.insert(p.key()) {
                        stack.push((p, 0));
                    }
                }
                _ => {
                    let (t, _) = stack.pop().expect("stack non-empty");
                    if t.inner.node.is_some() {
                        order.push(t);
                    } else if t.inner.is_param {
                        leaves.push(t);
                    }
                }
            }
        }

        let mut sink = GradSink::new();
        sink.insert(self, vec![T::one()]);

        for t in order.iter().rev() {
            let Some(g) = sink.take(t) else { continue };
            let node = t.inner.node.as_ref().expect("order holds op nodes");
            (node.backward)(&g, &mut sink);
        }

        for leaf in &leaves {
            if let Some(g) = sink.take(leaf) {
                let mut slot = leaf.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g.iter()) {
                            *a = *a + *b;
                        }
                    }
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

/// Transient gradient accumulator for one backward sweep, keyed by node
/// identity. First contribution moves in without a copy; later ones add.
pub(crate) struct GradSink<T: Scalar> {
    slots: HashMap<usize, Vec<T>>,
}

impl<T: Scalar> GradSink<T> {
    fn new() -> Self {
        GradSink { slots: HashMap::new() }
    }

    fn insert(&mut self, t: &Tensor<T>, g: Vec<T>) {
        self.slots.insert(t.key(), g);
    }

    fn take(&mut self, t: &Tensor<T>) -> Option<Vec<T>> {
        self.slots.remove(&t.key())
    }

    /// Adds a full-shape gradient contribution for `t`.
    pub(crate) fn add(&mut self, t: &Tensor<T>, g: Vec<T>) {
        debug_assert_eq!(g.len(), t.numel(), "gradient shape mismatch");
        match self.slots.entry(t.key()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                let acc = e.get_mut();
                for (a, b) in acc.iter_mut().zip(g.iter()) {
                    *a = *a + *b;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(g);
            }
        }
    }

    /// Zero-initialized slot for `t`, for backwards that scatter in place.
    pub(crate) fn slot(&mut self, t: &Tensor<T>) -> &mut Vec<T> {
        self.slots.entry(t.key()).or_insert_with(|| vec![T::zero(); t.numel()])
    }
}

/// Builds an op result. When grad is enabled and any parent participates in
/// the graph, `backward` is recorded; it receives the upstream gradient and
/// pushes contributions for each parent into the sink.
pub(crate) fn result_of<T: Scalar>(
    data: Vec<T>,
    shape: Vec<usize>,
    parents: &[&Tensor<T>],
    backward: impl Fn(&[T], &mut GradSink<T>) + 'static,
) -> Tensor<T> {
    let track = grad_enabled() && parents.iter().any(|p| p.tracks_grad());
    let node = if track {
        Some(Node {
            parents: parents.iter().map(|p| (*p).clone()).collect(),
            backward: Box::new(backward) as BackwardFn<T>,
        })
    } else {
        None
    };
    Tensor::new_inner(data, shape, false, node)
}
