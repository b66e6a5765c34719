//! A small reverse-mode automatic differentiation engine over dense `f32`
//! tensors.
//!
//! Values are immutable once built. Every operation whose inputs require a
//! gradient records a backward closure; [`Tensor::backward`] walks that graph
//! in reverse topological order. Inside a [`no_grad`] scope nothing is
//! recorded, so long sampling loops do not retain their history.
//!
//! All kernels are single-threaded with a fixed reduction order, so results
//! are bitwise reproducible on a given machine.

mod conv;
mod linalg;
mod norm;
mod ops;

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use conv::conv2d;
pub use norm::group_norm;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Given the output gradient and which inputs need one, returns one optional
/// gradient per input.
pub type BackwardFn = Box<dyn Fn(&[f32], &[bool]) -> Vec<Option<Vec<f32>>> + Send + Sync>;

struct Backward {
    inputs: Vec<Tensor>,
    f: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    backward: Option<Backward>,
}

#[derive(Clone)]
pub struct Tensor(Arc<Node>);

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disables graph recording on this thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

pub struct NoGradGuard {
    prev: bool,
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, backward: Option<Backward>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            backward,
        }))
    }

    /// A constant tensor.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("new", format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// A leaf whose gradient [`Tensor::backward`] reports.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        let node = Arc::try_unwrap(t.0).unwrap_or_else(|_| unreachable!());
        Ok(Self::make(node.shape, node.data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::make(shape.to_vec(), vec![0.0; shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        Self::make(shape.to_vec(), vec![v; shape.iter().product()], false, None)
    }

    pub fn scalar(v: f32) -> Self {
        Self::make(vec![], vec![v], false, None)
    }

    /// Builds the result of a differentiable operation. The backward closure
    /// is kept only when recording is enabled and some input needs a gradient.
    pub fn from_op(shape: Vec<usize>, data: Vec<f32>, inputs: &[&Tensor], f: impl FnOnce() -> BackwardFn) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            let backward = Backward {
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                f: f(),
            };
            Self::make(shape, data, true, Some(backward))
        } else {
            Self::make(shape, data, false, None)
        }
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
        self.0.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        if !self.requires_grad() {
            return self.clone();
        }
        Self::make(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            &[a, b] => Ok((a, b)),
            s => Err(shape_err("dims2", format!("rank {} tensor", s.len()))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape() {
            &[a, b, c, d] => Ok((a, b, c, d)),
            s => Err(shape_err("dims4", format!("rank {} tensor", s.len()))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.0.data.clone(), &[self], || {
            Box::new(|g, _| vec![Some(g.to_vec())])
        }))
    }

    /// Gradients of this scalar with respect to every leaf that requires one.
    pub fn backward(&self) -> Result<Grads> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        let mut leaves = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.backward {
                None => {
                    leaves.insert(node.id(), grad);
                }
                Some(bw) => {
                    let needs: Vec<bool> = bw.inputs.iter().map(|t| t.requires_grad()).collect();
                    let grads = (bw.f)(&grad, &needs);
                    debug_assert_eq!(grads.len(), bw.inputs.len());
                    for ((input, g), need) in bw.inputs.iter().zip(grads).zip(needs) {
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
            }
        }
        Ok(Grads(leaves))
    }

    /// Nodes requiring grad, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(bw) = &t.0.backward {
                for input in &bw.inputs {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Number of recorded operations reachable from this tensor.
    pub fn graph_len(&self) -> usize {
        self.topo_order().iter().filter(|t| !t.is_leaf()).count()
    }
}

/// Leaf gradients keyed by tensor identity.
#[derive(Debug, Default)]
pub struct Grads(HashMap<u64, Vec<f32>>);

impl Grads {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.0.get(&t.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub use ops::*;
