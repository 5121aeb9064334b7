//! N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to a buffer plus an optional
//! graph node recording how it was produced. Calling [`Tensor::backward`] on
//! a scalar walks the graph once in reverse topological order and accumulates
//! gradients into every `requires_grad` leaf.
//!
//! Graph construction is single-threaded per training step; buffers that
//! participate in a live graph are never mutated in place.

mod scalar;
pub use scalar::{Precision, Scalar};

mod ops;

use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

/// Graph node: how a tensor was produced and how to push gradients to its
/// parents. The backward closure owns whatever activations it saved.
pub(crate) struct GraphNode<T: Scalar> {
    /// Operation tag, for diagnostics.
    pub(crate) tag: &'static str,
    pub(crate) parents: Vec<Tensor<T>>,
    /// Maps the upstream gradient (same numel as this tensor) to one
    /// gradient buffer per parent; `None` marks a non-differentiable input.
    #[allow(clippy::type_complexity)]
    pub(crate) backward: Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>,
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<GraphNode<T>>,
}

/// Handle to an n-dimensional array participating in a computation graph.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.node.as_ref().map(|n| n.tag))
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape,
                detail: format!("buffer holds {} elements", data.len()),
            });
        }
        Ok(Self::make(shape, data, false, None))
    }

    /// Trainable leaf: participates in backward and accumulates gradient.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "param",
                shape,
                detail: format!("buffer holds {} elements", data.len()),
            });
        }
        Ok(Self::make(shape, data, true, None))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::make(shape, vec![T::ZERO; numel], false, None)
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self::make(shape, vec![value; numel], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::make(vec![1], vec![value], false, None)
    }

    pub(crate) fn make(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        node: Option<GraphNode<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
            }),
        }
    }

    /// Wraps the result of an operation, wiring it into the graph when any
    /// parent requires gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        tag: &'static str,
        parents: Vec<Tensor<T>>,
        backward: Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>,
    ) -> Self {
        let track = parents.iter().any(|p| p.inner.requires_grad);
        let node = track.then(|| GraphNode {
            tag,
            parents,
            backward,
        });
        Self::make(shape, data, track, node)
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

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.inner.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    /// Overwrites the buffer of a leaf. Optimizer-only entry point; graph
    /// tensors are never mutated.
    pub fn set_data(&self, data: &[T]) {
        debug_assert!(self.inner.node.is_none(), "set_data on a graph tensor");
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len());
        d.copy_from_slice(data);
    }

    pub fn map_data_mut(&self, f: impl FnOnce(&mut [T])) {
        debug_assert!(self.inner.node.is_none(), "mutating a graph tensor");
        f(self.inner.data.borrow_mut().as_mut_slice());
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Detached copy: same data, no graph, no gradient tracking.
    pub fn detach(&self) -> Tensor<T> {
        Self::make(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    fn key(&self) -> *const () {
        Rc::as_ptr(&self.inner) as *const ()
    }

    /// Reverse-mode sweep from a scalar root. Every `requires_grad` leaf
    /// reachable from the root accumulates its gradient; repeated calls
    /// without `zero_grad` keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarBackward {
                shape: self.inner.shape.clone(),
            });
        }

        // Post-order DFS, iterative to survive deep graphs.
        let mut topo: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<*const ()> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        while let Some((t, child_idx)) = stack.pop() {
            if child_idx == 0 {
                if !visited.insert(t.key()) {
                    continue;
                }
            }
            let n_parents = t.inner.node.as_ref().map_or(0, |n| n.parents.len());
            if child_idx < n_parents {
                let parent = t.inner.node.as_ref().unwrap().parents[child_idx].clone();
                stack.push((t, child_idx + 1));
                if !visited.contains(&parent.key()) && parent.inner.requires_grad {
                    stack.push((parent, 0));
                }
            } else {
                topo.push(t);
            }
        }

        // Interior gradients are scratch space for this sweep; leaf
        // gradients persist and accumulate across sweeps.
        for t in &topo {
            if t.inner.node.is_some() {
                *t.inner.grad.borrow_mut() = None;
            }
        }
        *self.inner.grad.borrow_mut() = Some(vec![T::ONE]);

        for t in topo.iter().rev() {
            let Some(node) = t.inner.node.as_ref() else {
                continue;
            };
            let upstream = match t.inner.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue, // not on any path from the root
            };
            let parent_grads = (node.backward)(&upstream);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.inner.requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.numel());
                let mut slot = parent.inner.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&pg) {
                            *a += *g;
                        }
                    }
                    None => *slot = Some(pg),
                }
            }
            // Free interior gradient once consumed.
            if t.key() != self.key() {
                *t.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
