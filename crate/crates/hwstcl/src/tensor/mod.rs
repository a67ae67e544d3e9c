//! Dense 64-bit tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a node in an implicit computation
//! graph. Operations record their inputs together with a backward rule;
//! calling [`Tensor::backward`] on a scalar walks the recorded operations
//! in reverse topological order exactly once and accumulates `d loss / d
//! leaf` into every `requires_grad` leaf.
//!
//! Design constraints the rest of the crate relies on:
//!
//! * 64-bit floats everywhere, row-major storage.
//! * Broadcasting is restricted to scalar-vs-tensor and equal shapes.
//! * Leaf gradients accumulate across backward calls until
//!   [`Tensor::zero_grad`] is called.
//! * All reductions run in a fixed sequential order, so results are
//!   bit-reproducible for a given input.
//!
//! Graphs are confined to one thread (`Tensor` is intentionally `!Send`).
//! Parallel training snapshots parameter data as plain `Vec<f64>` and
//! rebuilds thread-local graphs; see the `train` module.

mod ops;
pub mod gradcheck;
mod sparse;

pub use sparse::{sparse_matmul, SparseCoo};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::HwstclError;

/// Backward rule: given the gradient of the loss w.r.t. this node's output,
/// deposit gradient contributions for the node's parents into the store.
type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct OpRecord {
    /// Parents kept for graph traversal; backward closures capture what
    /// they need by value and address parents through their node keys.
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Persistent accumulated gradient; populated on `requires_grad` leaves.
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Option<OpRecord>,
}

/// Scratch gradient buffers used during a single backward pass, keyed by
/// node address. Keeping propagation out of the persistent `grad` field is
/// what makes leaf accumulation across backward calls exact.
pub struct GradStore {
    map: HashMap<usize, Vec<f64>>,
}

impl GradStore {
    fn new() -> Self {
        GradStore {
            map: HashMap::new(),
        }
    }

    /// Mutable zero-initialized buffer for the node identified by `key`.
    pub fn entry(&mut self, key: usize, len: usize) -> &mut [f64] {
        self.map.entry(key).or_insert_with(|| vec![0.0; len])
    }

    fn take(&mut self, key: usize) -> Option<Vec<f64>> {
        self.map.remove(&key)
    }
}

/// Shared handle to a differentiable dense tensor.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Node>>);

impl Tensor {
    // ----- constructors -------------------------------------------------

    /// Leaf tensor from raw row-major data.
    ///
    /// Panics if `data.len() != product(shape)` or any extent is zero.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert!(
            shape.iter().all(|&e| e > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor(Rc::new(RefCell::new(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            op: None,
        })))
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![1.0; numel])
    }

    /// n-by-n identity matrix.
    pub fn eye(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_vec(&[n, n], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..numel).map(|i| f(i)).collect())
    }

    /// Leaf with entries drawn uniformly from `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    /// Marks this leaf as a differentiation target and returns it.
    pub fn requires_grad(self) -> Tensor {
        {
            let mut n = self.0.borrow_mut();
            assert!(
                n.op.is_none(),
                "requires_grad can only be set on leaf tensors"
            );
            n.requires_grad = true;
        }
        self
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let needs_grad = parents.iter().any(|p| p.0.borrow().requires_grad);
        let op = if needs_grad {
            Some(OpRecord { parents, backward })
        } else {
            None
        };
        Tensor(Rc::new(RefCell::new(Node {
            shape,
            data,
            grad: None,
            requires_grad: needs_grad,
            op,
        })))
    }

    // ----- accessors ----------------------------------------------------

    /// Stable key identifying the underlying node; used by backward rules.
    pub fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.0.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        let n = self.0.borrow();
        assert_eq!(n.shape.len(), 2, "rows() needs a rank-2 tensor");
        n.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        let n = self.0.borrow();
        assert_eq!(n.shape.len(), 2, "cols() needs a rank-2 tensor");
        n.shape[1]
    }

    /// Borrow of the row-major data.
    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.0.borrow(), |n| &n.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.0.borrow();
        assert_eq!(n.data.len(), 1, "item() needs a 1-element tensor");
        n.data[0]
    }

    /// Entry (i, j) of a rank-2 tensor.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        let n = self.0.borrow();
        assert_eq!(n.shape.len(), 2, "at() needs a rank-2 tensor");
        assert!(i < n.shape[0] && j < n.shape[1], "index out of range");
        n.data[i * n.shape[1] + j]
    }

    /// Overwrites the data of a leaf in place. Any graphs previously built
    /// from this leaf are stale afterwards; rebuild before backward.
    pub fn set_data(&self, data: &[f64]) {
        let mut n = self.0.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        n.data.copy_from_slice(data);
    }

    pub fn set_at(&self, flat_index: usize, value: f64) {
        let mut n = self.0.borrow_mut();
        assert!(flat_index < n.data.len(), "set_at index out of range");
        n.data[flat_index] = value;
    }

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Copy of the values as a fresh leaf outside any graph.
    pub fn detach(&self) -> Tensor {
        let n = self.0.borrow();
        Tensor::from_vec(&n.shape, n.data.clone())
    }

    /// Errors if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<(), HwstclError> {
        if self.0.borrow().data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(HwstclError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    // ----- backward -----------------------------------------------------

    /// Reverse-mode pass from a scalar loss.
    ///
    /// Visits every recorded operation reachable from the loss exactly once
    /// in reverse topological order, then adds the resulting gradients into
    /// the persistent `grad` buffers of `requires_grad` leaves. Repeated
    /// calls accumulate; use [`Tensor::zero_grad`] between steps.
    ///
    /// Panics if the loss is not a 1-element tensor.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward() requires a scalar loss, got shape {:?}",
            self.shape()
        );

        // Post-order DFS over parents, pruned at nodes that do not require
        // gradients. The resulting order lists parents before children, so
        // iterating it in reverse is reverse topological order.
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child_idx)) = stack.pop() {
            let key = node.key();
            if child_idx == 0 {
                if visited.contains_key(&key) {
                    continue;
                }
                visited.insert(key, ());
            }
            let parent = {
                let b = node.0.borrow();
                b.op.as_ref().and_then(|op| op.parents.get(child_idx).cloned())
            };
            match parent {
                Some(p) => {
                    stack.push((node, child_idx + 1));
                    if p.0.borrow().requires_grad && !visited.contains_key(&p.key()) {
                        stack.push((p, 0));
                    }
                }
                None => topo.push(node),
            }
        }

        let mut store = GradStore::new();
        store
            .entry(self.key(), 1)
            .copy_from_slice(&[1.0]);

        for node in topo.iter().rev() {
            let grad = match store.take(node.key()) {
                Some(g) => g,
                None => continue,
            };
            let b = node.0.borrow();
            if let Some(op) = &b.op {
                (op.backward)(&grad, &mut store);
            } else if b.requires_grad {
                drop(b);
                let mut m = node.0.borrow_mut();
                match &mut m.grad {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grad.iter()) {
                            *a += g;
                        }
                    }
                    None => m.grad = Some(grad),
                }
            }
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.0.borrow();
        let preview: Vec<f64> = n.data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor{{shape: {:?}, requires_grad: {}, data: {:?}{}}}",
            n.shape,
            n.requires_grad,
            preview,
            if n.data.len() > 8 { ", ..." } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.shape(), vec![2, 2]);
        assert_eq!(t.at(1, 0), 3.0);
        assert_eq!(t.numel(), 4);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_data_mismatch_panics() {
        let _ = Tensor::from_vec(&[2, 3], vec![1.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).requires_grad();
        let loss = x.sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).requires_grad();
        let loss = x.mul(&x).sum_all();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn two_backward_passes_accumulate_exactly() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).requires_grad();
        let loss = x.mul(&x).sum_all();
        loss.backward();
        let g1 = x.grad().unwrap();
        loss.backward();
        let g2 = x.grad().unwrap();
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn unreachable_leaf_keeps_no_grad() {
        let x = Tensor::scalar(1.0).requires_grad();
        let y = Tensor::scalar(2.0).requires_grad();
        let loss = x.mul_scalar(3.0);
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
        assert!(y.grad().is_none());
    }

    #[test]
    #[should_panic(expected = "requires a scalar loss")]
    fn backward_on_non_scalar_panics() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).requires_grad();
        x.mul(&x).backward();
    }

    #[test]
    fn check_finite_flags_nan() {
        let t = Tensor::from_vec(&[2], vec![1.0, f64::NAN]);
        assert!(t.check_finite("test").is_err());
        let ok = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        assert!(ok.check_finite("test").is_ok());
    }

    #[test]
    fn diamond_graph_gradient_is_summed_once_per_path() {
        // loss = x*x + x  => dloss/dx = 2x + 1
        let x = Tensor::scalar(3.0).requires_grad();
        let loss = x.mul(&x).add(&x);
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }
}
