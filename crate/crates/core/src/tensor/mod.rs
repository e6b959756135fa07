//! Minimal reverse-mode autodiff over dense f32 tensors.
//!
//! Values are row-major `Vec<f32>` with an explicit shape. Each operation
//! returns a fresh node holding its inputs and a backward closure; calling
//! [`Tensor::backward`] on a scalar walks the recorded graph in reverse
//! topological order and accumulates gradients into every node that
//! requires them. Single-threaded and fully deterministic: identical inputs
//! produce bitwise-identical values and gradients.
//!
//! Gradient recording can be suspended with [`no_grad`] for inference, in
//! which case ops keep no parents and allocate nothing beyond their output.

mod ops;

pub use ops::conv2d_raw;

use crate::rng::Rng;
use alloc::boxed::Box;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Cell, RefCell};

// Node ids are only used for graph traversal bookkeeping within one thread.
#[cfg(target_has_atomic = "64")]
mod id {
    use core::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(1);
    pub fn next() -> u64 {
        NEXT.fetch_add(1, Ordering::Relaxed)
    }
}
#[cfg(not(target_has_atomic = "64"))]
mod id {
    use core::sync::atomic::{AtomicUsize, Ordering};
    static NEXT: AtomicUsize = AtomicUsize::new(1);
    pub fn next() -> u64 {
        NEXT.fetch_add(1, Ordering::Relaxed) as u64
    }
}

#[cfg(feature = "std")]
std::thread_local! {
    static GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}
#[cfg(not(feature = "std"))]
static GRAD_DEPTH: SyncCell = SyncCell(Cell::new(0));
#[cfg(not(feature = "std"))]
struct SyncCell(Cell<u32>);
// Single execution context assumed without std; see the crate-level notes.
#[cfg(not(feature = "std"))]
unsafe impl Sync for SyncCell {}

fn grad_suspended() -> bool {
    #[cfg(feature = "std")]
    {
        GRAD_DEPTH.with(|d| d.get() > 0)
    }
    #[cfg(not(feature = "std"))]
    {
        GRAD_DEPTH.0.get() > 0
    }
}

fn adjust_grad_depth(delta: i32) {
    #[cfg(feature = "std")]
    GRAD_DEPTH.with(|d| d.set((d.get() as i32 + delta) as u32));
    #[cfg(not(feature = "std"))]
    GRAD_DEPTH.0.set((GRAD_DEPTH.0.get() as i32 + delta) as u32);
}

/// Suspends gradient recording for the current scope.
pub struct NoGradGuard(());

impl NoGradGuard {
    fn new() -> Self {
        adjust_grad_depth(1);
        NoGradGuard(())
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        adjust_grad_depth(-1);
    }
}

/// Run `f` without recording the autodiff graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _guard = NoGradGuard::new();
    f()
}

type BackwardFn = Box<dyn Fn(&[f32], &[Tensor])>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    value: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense f32 tensor participating in the autodiff graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, values: Vec<f32>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor {
            node: Rc::new(Node {
                id: id::next(),
                shape,
                value: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub(crate) fn op(
        shape: Vec<usize>,
        values: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let track = !grad_suspended() && parents.iter().any(|p| p.node.requires_grad);
        if !track {
            return Tensor::leaf(shape, values, false);
        }
        Tensor {
            node: Rc::new(Node {
                id: id::next(),
                shape,
                value: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad: true,
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f32>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value length mismatch"
        );
        Tensor::leaf(shape.to_vec(), values, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![0.0; shape.iter().product()], false)
    }

    pub fn full(shape: &[usize], fill: f32) -> Tensor {
        Tensor::leaf(shape.to_vec(), vec![fill; shape.iter().product()], false)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::leaf(vec![1], vec![v], false)
    }

    pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), rng.normal_vec(n), false)
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], values: Vec<f32>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor::leaf(shape.to_vec(), values, true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Copy of the values.
    pub fn values(&self) -> Vec<f32> {
        self.node.value.borrow().clone()
    }

    /// Read access without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f32]) -> R) -> R {
        f(&self.node.value.borrow())
    }

    /// Scalar extraction; panics unless the tensor has exactly one element.
    pub fn item(&self) -> f32 {
        let v = self.node.value.borrow();
        assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        v[0]
    }

    pub fn is_finite(&self) -> bool {
        self.node.value.borrow().iter().all(|v| v.is_finite())
    }

    /// Sum of all elements accumulated in f64.
    pub fn sum_f64(&self) -> f64 {
        self.node.value.borrow().iter().map(|&v| v as f64).sum()
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.node.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Cut the graph: same values, no history, no grad requirement.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.node.shape.clone(), self.values(), false)
    }

    /// In-place value update for optimizer steps on leaf parameters.
    pub fn update_values(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.node.value.borrow_mut());
    }

    /// Stable identity of the underlying node, for parameter bookkeeping.
    pub fn node_id(&self) -> u64 {
        self.node.id
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[f32]) {
        if !self.node.requires_grad {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward() requires a scalar output");
        let order = topo_order(self);
        *self.node.grad.borrow_mut() = Some(vec![1.0]);
        for tensor in order.iter().rev() {
            let Some(back) = tensor.node.backward.as_ref() else {
                continue;
            };
            let upstream = tensor.node.grad.borrow().clone();
            let Some(upstream) = upstream else { continue };
            back(&upstream, &tensor.node.parents);
        }
    }
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    // Iterative post-order DFS; parents appear before their consumers.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: alloc::collections::BTreeSet<u64> = alloc::collections::BTreeSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.node.id);
    while let Some((tensor, child_idx)) = stack.pop() {
        if child_idx < tensor.node.parents.len() {
            let parent = tensor.node.parents[child_idx].clone();
            stack.push((tensor, child_idx + 1));
            if parent.node.requires_grad && visited.insert(parent.node.id) {
                stack.push((parent, 0));
            }
        } else {
            order.push(tensor);
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::testutil::numeric_grad;

    #[test]
    fn scalar_chain_backward() {
        let x = Tensor::param(&[1], vec![3.0]);
        let y = x.mul(&x).scale(2.0).add_scalar(1.0); // 2x^2 + 1
        y.backward();
        assert_eq!(y.item(), 19.0);
        assert_eq!(x.grad().unwrap()[0], 12.0);
    }

    #[test]
    fn grad_accumulates_across_backward_calls() {
        let x = Tensor::param(&[1], vec![2.0]);
        x.mul(&x).backward();
        x.mul(&x).backward();
        assert_eq!(x.grad().unwrap()[0], 8.0);
        x.clear_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_builds_no_graph() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let y = no_grad(|| x.mul(&x));
        assert!(!y.requires_grad());
        y.sum_all(); // still usable as plain data
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        let x = Tensor::param(&[1], vec![5.0]);
        let a = x.scale(2.0);
        let b = x.scale(3.0);
        a.add(&b).backward();
        assert_eq!(x.grad().unwrap()[0], 5.0);
    }

    #[test]
    fn numeric_gradcheck_composite() {
        // f = sum(silu(x) * relu(x) + x^2) exercised through the generic checker.
        let f = |x: &Tensor| x.silu().mul(&x.relu()).add(&x.mul(x)).sum_all();
        let x = Tensor::param(&[6], vec![-1.5, -0.3, 0.2, 0.9, 1.7, 2.4]);
        let y = f(&x);
        y.backward();
        let got = x.grad().unwrap();
        let want = numeric_grad(&x, |t| f(t).item());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-2, "grad {g} vs numeric {w}");
        }
    }
}
