//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once created; the only interior mutation is
//! gradient accumulation, which is guarded by a mutex so tensors can move
//! freely between threads. Every operation records the closure needed to
//! propagate exact analytic gradients to its inputs. `backward` walks the
//! graph in reverse topological order, so accumulation order is fixed and
//! results are bit-deterministic for a given construction sequence.

pub(crate) mod kernels;
mod ops;

pub use ops::concat;

use std::cell::Cell;
use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::rng::Rng;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` without recording the autodiff graph (inference mode).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

pub(crate) struct BackwardCtx<'a> {
    pub grad_out: &'a [f32],
    pub out_data: &'a [f32],
    pub parents: &'a [Tensor],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx) + Send + Sync>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Build a tensor from a flat row-major buffer.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "from_vec: shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![0.0; n], false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    /// Scalar wrapper.
    pub fn scalar(value: f32) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape.to_vec(), rng.normal_vec(n), false)
    }

    /// Fan-in-scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform_fanin(shape: &[usize], fan_in: usize, scale: f32, rng: &mut Rng) -> Tensor {
        let bound = scale / (fan_in.max(1) as f32).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor::leaf(shape.to_vec(), data, false)
    }

    /// Mark a leaf as a trainable parameter (gradient-tracking).
    pub fn requires_grad(self) -> Tensor {
        if self.inner.requires_grad {
            return self;
        }
        assert!(
            self.inner.backward.is_none(),
            "requires_grad must be set on leaves"
        );
        Tensor::leaf(self.inner.shape.clone(), self.inner.data.clone(), true)
    }

    /// Internal constructor for op outputs.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "op {op}");
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "op {op} produced a non-finite value"
        );
        let no_grad = NO_GRAD.with(|c| c.get());
        let track = !no_grad && parents.iter().any(|p| p.inner.requires_grad);
        if !track {
            return Tensor::leaf(shape, data, false);
        }
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad: true,
                grad: Mutex::new(None),
                parents,
                backward: Some(backward),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar");
        self.inner.data[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.backward.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// Remove and return the accumulated gradient.
    pub fn take_grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().take()
    }

    /// Add `delta`-producing updates into this tensor's gradient buffer.
    pub(crate) fn accum_grad(&self, f: impl FnOnce(&mut [f32])) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.lock().unwrap();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.inner.data.len()]);
        f(buf);
    }

    /// Reverse-mode differentiation from a scalar loss. Populates `grad` on
    /// every gradient-tracking leaf that the loss depends on.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }
        if !self.inner.requires_grad {
            return Ok(()); // loss independent of every parameter
        }

        // Post-order DFS; reversing it yields a valid topological order in
        // which every node is processed before any of its inputs.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, pi)) = stack.last_mut() {
            let parents = &node.inner.parents;
            if *pi < parents.len() {
                let p = parents[*pi].clone();
                *pi += 1;
                if p.inner.requires_grad && visited.insert(p.inner.id) {
                    stack.push((p, 0));
                }
            } else {
                order.push(node.clone());
                stack.pop();
            }
        }

        self.accum_grad(|g| g[0] += 1.0);

        for node in order.iter().rev() {
            let Some(bw) = node.inner.backward.as_ref() else {
                continue; // leaf: keep the accumulated gradient
            };
            // Intermediate gradients are dropped once propagated.
            let Some(grad_out) = node.inner.grad.lock().unwrap().take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad_out: &grad_out,
                out_data: &node.inner.data,
                parents: &node.inner.parents,
            };
            bw(&ctx);
        }
        Ok(())
    }
}
