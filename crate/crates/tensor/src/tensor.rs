use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{dim_err, Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Gradient of an op's output mapped to gradients of each parent, in parent
/// order. `None` means the op contributes nothing to that parent.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// A dense row-major f64 tensor.
///
/// Cloning is cheap: clones share storage. Results of differentiable ops keep
/// their inputs alive so that [`Tensor::backward`] can walk the graph.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.0.data.borrow();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor(Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    /// A constant tensor. Fails if `shape` does not account for every value.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(dim_err!("shape {:?} holds {} values, got {}", shape, numel_of(shape), data.len()));
        }
        Ok(Self::from_parts(data, shape.to_vec(), false, None))
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(dim_err!("shape {:?} holds {} values, got {}", shape, numel_of(shape), data.len()));
        }
        Ok(Self::from_parts(data, shape.to_vec(), true, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(vec![0.0; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::from_parts(vec![1.0; numel_of(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(vec![v; numel_of(shape)], shape.to_vec(), false, None)
    }

    /// Standard-normal constant drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::from_parts(data, shape.to_vec(), false, None)
    }

    /// Builds the result of a custom differentiable op.
    ///
    /// The graph edge is only recorded when grad mode is on and at least one
    /// parent tracks gradients; otherwise the result is a plain constant and
    /// `backward` is dropped unused.
    pub fn from_op(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: BackwardFn) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(dim_err!("op produced {} values for shape {:?}", data.len(), shape));
        }
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let node = track.then_some(Node { parents, backward });
        Ok(Self::from_parts(data, shape, false, node))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.0.shape[axis]
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values. Only meant for leaves (optimizer
    /// updates, finite-difference probes); mutating an interior node does not
    /// invalidate anything already computed from it.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!("item() on tensor of shape {:?}", self.shape())));
        }
        Ok(self.0.data.borrow()[0])
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// True for trainable leaves and for anything computed from one while
    /// grad mode was enabled.
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad || self.0.node.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    /// Overwrites the accumulated gradient (used by clipping and tests).
    pub fn set_grad(&self, grad: Vec<f64>) {
        assert_eq!(grad.len(), self.numel(), "gradient length must match the tensor");
        *self.0.grad.borrow_mut() = Some(grad);
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.to_vec(), self.shape().to_vec(), false, None)
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// trainable leaf reachable from `self`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else { continue };
            match &t.0.node {
                None => {
                    if t.0.requires_grad {
                        let mut slot = t.0.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(node) => {
                    let parent_grads = (node.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    // Post-order DFS; parents precede children in the returned list.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
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
            if let Some(node) = &t.0.node {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}
