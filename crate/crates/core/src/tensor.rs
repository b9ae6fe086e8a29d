//! Dense single-precision tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable values: every operation produces a new tensor.
//! When gradient recording is enabled (see [`with_grads`]) and an input
//! requires gradients, the op attaches a backward closure; [`backward`]
//! walks the recorded graph and returns a [`GradStore`] keyed by tensor id.
//!
//! Forward evaluation with recording disabled builds no graph, so frozen
//! models can run concurrently from many threads.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with gradient recording enabled on this thread.
pub fn with_grads<R>(f: impl FnOnce() -> R) -> R {
    RECORDING.with(|r| {
        let prev = r.get();
        r.set(true);
        let out = f();
        r.set(prev);
        out
    })
}

pub fn grads_enabled() -> bool {
    RECORDING.with(|r| r.get())
}

type BackwardFn = Box<dyn Fn(&[f32], &mut GradStore) + Send + Sync>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    is_param: bool,
    node: Option<Node>,
}

/// A dense row-major f32 tensor. Cheap to clone (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Arc<Vec<f32>>, is_param: bool, node: Option<Node>) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                is_param,
                node,
            }),
        }
    }

    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), false, None))
    }

    /// A learnable leaf tensor: participates in gradient graphs.
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::from_parts(t.inner.shape.clone(), t.inner.data.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![0.0; n]), false, None)
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), Arc::new(vec![v; n]), false, None)
    }

    pub fn scalar(v: f32) -> Self {
        Self::from_parts(vec![1], Arc::new(vec![v]), false, None)
    }

    /// Internal: result of an op. Attaches the backward closure only when
    /// recording is on and some parent needs gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: &[&Tensor],
        backward: impl Fn(&[f32], &mut GradStore) + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let node = if grads_enabled() && parents.iter().any(|p| p.requires_grad()) {
            Some(Node {
                parents: parents.iter().map(|&p| p.clone()).collect(),
                backward: Box::new(backward),
            })
        } else {
            None
        };
        Self::from_parts(shape, Arc::new(data), false, node)
    }

    /// Like `from_op` but shares the underlying storage (reshape).
    pub(crate) fn view_op(
        &self,
        shape: Vec<usize>,
        backward: impl Fn(&[f32], &mut GradStore) + Send + Sync + 'static,
    ) -> Self {
        let node = if grads_enabled() && self.requires_grad() {
            Some(Node { parents: vec![self.clone()], backward: Box::new(backward) })
        } else {
            None
        };
        Self::from_parts(shape, self.inner.data.clone(), false, node)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn elem_count(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.is_param || self.inner.node.is_some()
    }

    pub fn is_param(&self) -> bool {
        self.inner.is_param
    }

    /// New tensor sharing this storage, detached from any gradient graph.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.inner.shape.clone(), self.inner.data.clone(), false, None)
    }

    pub fn scalar_value(&self) -> Result<f32> {
        if self.elem_count() != 1 {
            return Err(Error::shape(format!("expected scalar, got shape {:?}", self.shape())));
        }
        Ok(self.inner.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Dimension size with bounds checking.
    pub fn dim(&self, axis: usize) -> Result<usize> {
        self.inner
            .shape
            .get(axis)
            .copied()
            .ok_or_else(|| Error::shape(format!("axis {} out of range for shape {:?}", axis, self.shape())))
    }
}

/// Gradients produced by [`backward`], keyed by tensor id.
#[derive(Default)]
pub struct GradStore {
    grads: HashMap<u64, Vec<f32>>,
}

impl GradStore {
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn get_by_id(&self, id: u64) -> Option<&[f32]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    pub fn accumulate(&mut self, t: &Tensor, g: Vec<f32>) {
        debug_assert_eq!(g.len(), t.elem_count());
        match self.grads.entry(t.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (a, b) in e.get_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(g);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Reverse-mode sweep from a scalar `loss`. Returns gradients for every
/// tensor in the recorded graph that requires them.
pub fn backward(loss: &Tensor) -> Result<GradStore> {
    if loss.elem_count() != 1 {
        return Err(Error::shape(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    // Post-order DFS: every tensor appears after its parents.
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
        let parents: Vec<Tensor> = match &t.inner.node {
            Some(node) => node.parents.clone(),
            None => Vec::new(),
        };
        stack.push((t, true));
        for p in parents {
            if !seen.contains(&p.id()) {
                stack.push((p, false));
            }
        }
    }

    let mut store = GradStore::default();
    store.accumulate(loss, vec![1.0]);
    // Reverse order: consumers are processed before producers.
    for t in order.iter().rev() {
        if let Some(node) = &t.inner.node {
            let g = match store.grads.get(&t.id()) {
                Some(g) => g.clone(),
                None => continue, // branch that does not reach the loss
            };
            (node.backward)(&g, &mut store);
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn tensor_invariants() {
        let t = Tensor::new(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.elem_count(), 6);
        assert!(Tensor::new(&[2, 3], vec![1.0; 5]).is_err());
    }

    #[test]
    fn no_graph_without_recording() {
        let p = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = ops::scale(&p, 3.0);
        assert!(y.inner.node.is_none());
        let y = with_grads(|| ops::scale(&p, 3.0));
        assert!(y.inner.node.is_some());
    }

    #[test]
    fn backward_accumulates_over_shared_use() {
        // y = p + p  =>  dy/dp = 2
        let p = Tensor::param(&[3], vec![1.0, -1.0, 0.5]).unwrap();
        let (loss, grads) = with_grads(|| {
            let y = ops::add(&p, &p).unwrap();
            let loss = ops::sum_all(&y);
            let g = backward(&loss).unwrap();
            (loss, g)
        });
        assert_eq!(loss.scalar_value().unwrap(), 1.0);
        assert_eq!(grads.get(&p).unwrap(), &[2.0, 2.0, 2.0]);
    }
}
