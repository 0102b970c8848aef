//! Dense real tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable flat buffer plus shape. Every operation that
//! produces a tensor records, when gradients are enabled and some input
//! requires them, the saved inputs and an adjoint closure. Creation order
//! doubles as tape position: [`Tensor::backward`] replays adjoints in
//! strictly decreasing creation order, which makes two runs with identical
//! inputs bit-identical.
//!
//! Tensors are single-threaded (`Rc`-backed); independent computations on
//! different threads never share data, which is the whole concurrency story.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::profile;

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

/// True when operations should record adjoints for inputs that require grad.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with gradient recording disabled (restored on exit, panic-safe).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _guard = Guard(GRAD_ENABLED.with(|c| {
        let prev = c.get();
        c.set(false);
        prev
    }));
    f()
}

/// Arguments handed to an adjoint closure during the backward sweep.
pub(crate) struct BackwardCtx<'a, E: Scalar> {
    /// Forward output of the op being differentiated.
    pub out: &'a [E],
    /// Incoming gradient w.r.t. that output.
    pub grad: &'a [E],
}

/// Computes per-parent gradient contributions. Entries may be `None` for
/// parents known not to need a gradient.
pub(crate) type AdjointFn<E> = Box<dyn Fn(&BackwardCtx<'_, E>) -> Vec<Option<Vec<E>>>>;

pub(crate) struct Node<E: Scalar> {
    pub parents: Vec<Tensor<E>>,
    pub adjoint: AdjointFn<E>,
}

struct Inner<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    node: Option<Node<E>>,
    grad: RefCell<Option<Vec<E>>>,
    bytes: usize,
}

impl<E: Scalar> Drop for Inner<E> {
    fn drop(&mut self) {
        profile::mem_release(self.bytes);
    }
}

pub struct Tensor<E: Scalar> {
    inner: Rc<Inner<E>>,
}

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Scalar> Tensor<E> {
    pub(crate) fn make(
        data: Vec<E>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<Node<E>>,
    ) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let bytes = data.len() * E::BYTES;
        profile::mem_acquire(bytes);
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                node,
                grad: RefCell::new(None),
                bytes,
            }),
        }
    }

    /// Leaf tensor without gradient tracking.
    pub fn new(data: Vec<E>, shape: &[usize]) -> Self {
        Tensor::make(data, shape.to_vec(), false, None)
    }

    /// Leaf tensor that accumulates a gradient during backward passes.
    pub fn param(data: Vec<E>, shape: &[usize]) -> Self {
        Tensor::make(data, shape.to_vec(), true, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(vec![E::zero(); shape.iter().product()], shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::new(vec![E::one(); shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor::new(vec![value; shape.iter().product()], shape)
    }

    pub fn scalar(value: E) -> Self {
        Tensor::new(vec![value], &[1])
    }

    pub fn from_f64_slice(values: &[f64], shape: &[usize]) -> Self {
        Tensor::new(values.iter().map(|&v| E::from_f64(v)).collect(), shape)
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    /// Row count for rank-2 tensors; a rank-1 tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.inner.shape.len() {
            1 => 1,
            2 => self.inner.shape[0],
            n => panic!("rows() on rank-{n} tensor"),
        }
    }

    /// Column count for rank-1/2 tensors.
    pub fn cols(&self) -> usize {
        match self.inner.shape.len() {
            1 => self.inner.shape[0],
            2 => self.inner.shape[1],
            n => panic!("cols() on rank-{n} tensor"),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of {} elements", self.numel());
        self.inner.data[0]
    }

    /// Copy of the accumulated gradient, if any backward pass reached this leaf.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same data, detached from the tape.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::new(self.inner.data.clone(), &self.inner.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn has_node(&self) -> bool {
        self.inner.node.is_some()
    }

    /// Reverse-mode sweep from a scalar output.
    ///
    /// Walks the recorded operations in reverse creation order, accumulating
    /// gradient contributions; every reachable `requires_grad` leaf ends up
    /// with a populated grad (added to any existing accumulator).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Numeric(format!(
                "backward requires a scalar output, got {} elements",
                self.numel()
            )));
        }

        // Gather every tensor reachable from the output, deduped by id.
        let mut reachable: HashMap<u64, Tensor<E>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if reachable.contains_key(&t.id()) {
                continue;
            }
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if !reachable.contains_key(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            reachable.insert(t.id(), t);
        }

        // Reverse tape order = decreasing creation id.
        let mut order: Vec<u64> = reachable.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(self.id(), vec![E::one()]);

        for id in order {
            let Some(g) = grads.remove(&id) else { continue };
            let t = &reachable[&id];
            match &t.inner.node {
                None => {
                    if t.inner.requires_grad {
                        let mut slot = t.inner.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&g) {
                                    *a = *a + *b;
                                }
                            }
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(node) => {
                    let ctx = BackwardCtx {
                        out: &t.inner.data,
                        grad: &g,
                    };
                    let parent_grads = (node.adjoint)(&ctx);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&pg) {
                                    *a = *a + *b;
                                }
                            }
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &self.inner.data)
            .finish()
    }
}
