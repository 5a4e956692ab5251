//! Dense f64 tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted buffer. Operations on
//! tensors that require gradients record a node holding their parents and a
//! backward closure; [`backward`] walks those nodes in reverse topological
//! order and returns a [`Gradients`] map keyed by leaf identity.

mod gradcheck;
pub mod kernels;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use ops::sigmoid;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward closure: receives the upstream gradient and a mask telling
/// which parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Dense row-major N-d array of f64 with an optional autodiff node.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Contract(format!(
                "buffer of {} values cannot have shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self::raw(data, shape.to_vec(), false, None))
    }

    fn raw(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, node: Option<Node>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                node,
            }),
        }
    }

    /// Result of a differentiable op. A node is recorded only if some
    /// parent requires a gradient.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node { parents, backward });
        Self::raw(data, shape, requires_grad, node)
    }

    pub fn scalar(v: f64) -> Self {
        Self::raw(vec![v], vec![], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::raw(vec![v; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape())
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(self.shape())
    }

    /// Fresh differentiable leaf holding the same values.
    pub fn param(&self) -> Self {
        Self::raw(self.data().to_vec(), self.shape().to_vec(), true, None)
    }

    /// Leaf with `requires_grad` set as requested.
    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(if requires_grad { t.param() } else { t })
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::raw(self.data().to_vec(), self.shape().to_vec(), false, None)
    }

    /// Replace the values of a leaf, keeping its identity (used by optimizers
    /// and checkpoint loading).
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape("set_data", self.shape(), &[data.len()]));
        }
        let (id, shape, rg) = (self.id(), self.shape().to_vec(), self.requires_grad());
        self.inner = Arc::new(Inner {
            id,
            shape,
            data,
            requires_grad: rg,
            node: None,
        });
        Ok(())
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.inner.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

/// Gradients of a scalar with respect to every differentiable leaf that
/// contributed to it.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<u64, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: &Tensor) -> Option<&Tensor> {
        self.map.get(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, leaf: &Tensor) -> bool {
        self.map.contains_key(&leaf.id())
    }
}

/// Reverse-mode sweep from a scalar `loss`.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    let mut out = Gradients::default();
    if !loss.requires_grad() {
        return Ok(out);
    }

    // Iterative post-order DFS gives a topological order.
    let mut order: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.inner.node {
            for p in &node.parents {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);
    for t in order.iter().rev() {
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        match &t.inner.node {
            None => {
                if t.requires_grad() {
                    let gt = Tensor::raw(g, t.shape().to_vec(), false, None);
                    out.map.insert(t.id(), gt);
                }
            }
            Some(node) => {
                let mask: Vec<bool> = node.parents.iter().map(|p| p.requires_grad()).collect();
                let parent_grads = (node.backward)(&g, &mask);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                    let (Some(pg), true) = (pg, *need) else {
                        continue;
                    };
                    debug_assert_eq!(pg.len(), p.numel(), "gradient size for parent");
                    match grads.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(p.id(), pg);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_buffer() {
        assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::new(vec![1.0; 6], &[2, 3]).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::ones(&[3]).param();
        assert!(matches!(backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::new(vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0], &[2, 3]).unwrap().param();
        let g = backward(&x.sum()).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_square_sum() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap().param();
        let loss = x.mul(&x).unwrap().sum();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_grad_leaf_absent_from_map() {
        let x = Tensor::new(vec![1.0, 2.0], &[2]).unwrap().param();
        let c = Tensor::new(vec![3.0, 4.0], &[2]).unwrap();
        let g = backward(&x.mul(&c).unwrap().sum()).unwrap();
        assert!(g.contains(&x));
        assert!(!g.contains(&c));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x*a) + sum(x*b) + sum(x) => grad = a + b + 1
        let x = Tensor::new(vec![1.0, -2.0, 0.3], &[3]).unwrap().param();
        let a = Tensor::new(vec![2.0, 3.0, 4.0], &[3]).unwrap();
        let b = Tensor::new(vec![-1.0, 0.5, 7.0], &[3]).unwrap();
        let l = x
            .mul(&a)
            .unwrap()
            .sum()
            .add(&x.mul(&b).unwrap().sum())
            .unwrap()
            .add(&x.sum())
            .unwrap();
        let g = backward(&l).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[2.0, 4.5, 12.0]);
    }

    #[test]
    fn set_data_keeps_identity() {
        let mut x = Tensor::ones(&[2]).param();
        let id = x.id();
        x.set_data(vec![3.0, 4.0]).unwrap();
        assert_eq!(x.id(), id);
        assert!(x.requires_grad());
        assert!(x.set_data(vec![1.0]).is_err());
    }
}
