use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};

use super::Scalar;
use crate::error::{Error, Result};

/// Vector-Jacobian product of one recorded op: maps the output gradient to
/// one optional gradient per parent (`None` for parents that need none).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operation for differentiation.
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

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<T>>,
    grad: RwLock<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<DiffArray<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Dense row-major array that records the operations producing it so that
/// gradients can be pulled back with [`DiffArray::backward`].
///
/// Cloning is cheap: clones share storage and gradient.
pub struct DiffArray<T: Scalar> {
    node: Arc<Node<T>>,
}

impl<T: Scalar> Clone for DiffArray<T> {
    fn clone(&self) -> Self {
        Self {
            node: Arc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for DiffArray<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffArray")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish_non_exhaustive()
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(Error::shape(op, shape, &[len]));
    }
    Ok(())
}

impl<T: Scalar> DiffArray<T> {
    fn build(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<DiffArray<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: RwLock::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Constant array (no gradient).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len("new", shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "new" });
        }
        Ok(Self::build(shape.to_vec(), data, false, Vec::new(), None))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_len("param", shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "param" });
        }
        Ok(Self::build(shape.to_vec(), data, true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![T::zero(); n], false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; n], false, Vec::new(), None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false, Vec::new(), None)
    }

    /// Output of a primitive. The backward closure is kept only when
    /// recording is enabled and some parent needs a gradient.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<DiffArray<T>>,
        backward: impl Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
    ) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Self::build(shape, data, true, parents, Some(Box::new(backward)))
        } else {
            Self::build(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn len(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<T>> {
        self.node.data.read()
    }

    /// Mutable access to the values; used by optimizers and checkpoint
    /// loading. Must not be called while a backward pass is running.
    pub fn data_mut(&self) -> RwLockWriteGuard<'_, Vec<T>> {
        self.node.data.write()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.read().clone()
    }

    /// Value of a single-element array.
    pub fn item(&self) -> T {
        self.node.data.read()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.read().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.write() = None;
    }

    /// Same values, cut from the recorded graph.
    pub fn detach(&self) -> Self {
        Self::build(
            self.node.shape.clone(),
            self.to_vec(),
            false,
            Vec::new(),
            None,
        )
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Reverse-mode pass from a scalar. Every reachable array that requires
    /// a gradient has `∂self/∂array` added to its gradient buffer; calling
    /// twice without [`zero_grad`](Self::zero_grad) accumulates.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS; reversed it is a topological order.
        let mut order: Vec<DiffArray<T>> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(DiffArray<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if visited.insert(node.id(), ()).is_some() {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.node.parents {
                if p.requires_grad() && !visited.contains_key(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if let Some(backward) = &node.node.backward {
                let parent_grads = backward(&g);
                debug_assert_eq!(parent_grads.len(), node.node.parents.len());
                for (parent, pg) in node.node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.len());
                    match grads.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a = *a + *b),
                        None => {
                            grads.insert(parent.id(), pg);
                        }
                    }
                }
            }
            let mut slot = node.node.grad.write();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
