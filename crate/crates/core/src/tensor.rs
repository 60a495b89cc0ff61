//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is an immutable node in a dynamically built graph. Operations
//! on tensors that require gradients record a backward closure together with
//! their parents; [`Tensor::backward`] walks the reachable graph in reverse
//! creation order and accumulates gradients into the leaves.
//!
//! Node ids are drawn from a global monotone counter, so a parent always has a
//! smaller id than any node computed from it and descending id order is a valid
//! reverse topological order.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Maps the gradient of a node's output to the gradients of its parents.
/// `None` entries are parents that do not require a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                grad_fn,
            }),
        }
    }

    fn checked(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        if shape.first() == Some(&0) {
            return Err(Error::EmptySet);
        }
        if shape.contains(&0) {
            return Err(Error::Contract(format!("zero-sized dimension in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self::build(data, shape.to_vec(), requires_grad, None))
    }

    /// A constant (non-differentiable) tensor.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::checked(data, shape, false)
    }

    /// A trainable leaf. Gradients accumulate into it on [`Tensor::backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::checked(data, shape, true)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::build(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::build(data, vec![n, n], false, None)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::shape("from_rows", &[m], &[bad.len()]));
        }
        Self::new(rows.concat(), &[n, m])
    }

    /// Records the result of a differentiable operation. When no parent requires
    /// a gradient the backward closure is dropped and the result is a constant.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let grad_fn = requires_grad.then_some(GradFn { parents, backward });
        Self::build(data, shape, requires_grad, grad_fn)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Contract(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn item(&self) -> Result<f64> {
        match self.data() {
            [v] => Ok(*v),
            _ => Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape()))),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data()[r * self.shape()[1] + c]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        self.node.grad.borrow_mut().take();
    }

    /// A constant copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        Self::build(self.data().to_vec(), self.shape().to_vec(), false, None)
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Reverse-mode pass from a single-element tensor. Gradients of
    /// `requires_grad` leaves are accumulated into their `grad` buffers.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.node.id) {
                continue;
            }
            if let Some(gf) = &t.node.grad_fn {
                stack.extend(gf.parents.iter().filter(|p| p.requires_grad()).cloned());
            }
            nodes.push(t);
        }
        nodes.sort_unstable_by_key(|t| std::cmp::Reverse(t.node.id));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.node.id, vec![1.0]);
        for t in &nodes {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            match &t.node.grad_fn {
                Some(gf) => {
                    let parent_grads = (gf.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), gf.parents.len());
                    for (p, pg) in gf.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match pending.get_mut(&p.node.id) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(p.node.id, pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &self.data())
            .finish()
    }
}
