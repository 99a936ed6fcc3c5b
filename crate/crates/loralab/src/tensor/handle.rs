//! The tensor handle: a shape plus a shared, lockable value/gradient buffer.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::Rng;
use rand_distr::StandardNormal;

use super::Element;
use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    requires_grad: bool,
    data: RwLock<Vec<E>>,
    grad: Mutex<Option<Vec<E>>>,
}

/// Dense n-dimensional array participating in reverse-mode differentiation.
///
/// Cloning a `Tensor` clones the *handle*: both handles see the same buffer.
/// This is what lets a parameter live across many per-step graphs — the
/// optimizer mutates the buffer, the next forward pass reads it.
///
/// A tensor with `requires_grad() == false` never accumulates a gradient.
pub struct Tensor<E: Element> {
    inner: Arc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Arc::clone(&self.inner) }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<E: Element> Tensor<E> {
    fn new(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                requires_grad,
                data: RwLock::new(data),
                grad: Mutex::new(None),
            }),
        }
    }

    /// Build a tensor from a flat buffer. The product of `shape` must equal
    /// `data.len()`.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::bad_shape(
                "from_vec",
                shape,
                format!("shape wants {numel} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Tensor::new(shape.to_vec(), data, false))
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(v: E) -> Self {
        Tensor::new(vec![1], vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![E::zero(); numel], false)
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![v; numel], false)
    }

    /// Gaussian init with mean 0 and the given standard deviation.
    ///
    /// Values are sampled in f64 and then narrowed, so a given seed yields
    /// the same underlying values in single and double precision.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                E::from_f64(z * std)
            })
            .collect();
        Tensor::new(shape.to_vec(), data, false)
    }

    /// Mark this tensor trainable. Intended for freshly built leaves.
    pub fn trained(self) -> Self {
        match Arc::try_unwrap(self.inner) {
            Ok(inner) => Tensor {
                inner: Arc::new(Inner { requires_grad: true, ..inner }),
            },
            Err(shared) => {
                let data = shared.data.read().expect("tensor data lock").clone();
                Tensor::new(shared.shape.clone(), data, true)
            }
        }
    }

    /// Result tensor produced by a graph operation.
    pub(crate) fn op_output(shape: Vec<usize>, data: Vec<E>, requires_grad: bool) -> Self {
        Tensor::new(shape, data, requires_grad)
    }

    /// Unique id, stable for the life of the process.
    pub fn id(&self) -> u64 {
        self.inner.id
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

    /// Interpret the shape as `(rows, cols)`; errors on non-matrices.
    pub fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::bad_shape(op, other, "expected a 2-d tensor")),
        }
    }

    /// Interpret the shape as a vector length; errors on non-vectors.
    pub fn as_vector(&self, op: &'static str) -> Result<usize> {
        match self.inner.shape.as_slice() {
            [n] => Ok(*n),
            other => Err(Error::bad_shape(op, other, "expected a 1-d tensor")),
        }
    }

    /// Snapshot of the value buffer.
    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.read().expect("tensor data lock").clone()
    }

    /// Run `f` against the value buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[E]) -> R) -> R {
        f(&self.inner.data.read().expect("tensor data lock"))
    }

    /// Mutate the value buffer in place. Used by optimizers, merges, and the
    /// finite-difference checker; never called from graph ops.
    pub fn modify(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.inner.data.write().expect("tensor data lock"));
    }

    /// Replace the value buffer. Lengths must match.
    pub fn set_data(&self, data: &[E]) -> Result<()> {
        let mut guard = self.inner.data.write().expect("tensor data lock");
        if guard.len() != data.len() {
            return Err(Error::bad_shape(
                "set_data",
                &self.inner.shape,
                format!("buffer has {} elements, got {}", guard.len(), data.len()),
            ));
        }
        guard.copy_from_slice(data);
        Ok(())
    }

    /// Value of a scalar (numel == 1) tensor.
    pub fn item(&self) -> E {
        let guard = self.inner.data.read().expect("tensor data lock");
        debug_assert_eq!(guard.len(), 1, "item() on non-scalar tensor");
        guard[0]
    }

    /// Snapshot of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.lock().expect("tensor grad lock").clone()
    }

    /// Drop any accumulated gradient.
    pub fn clear_grad(&self) {
        *self.inner.grad.lock().expect("tensor grad lock") = None;
    }

    /// Add `delta` into the gradient buffer. No-op for frozen tensors.
    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut guard = self.inner.grad.lock().expect("tensor grad lock");
        match guard.as_mut() {
            Some(g) => {
                debug_assert_eq!(g.len(), delta.len());
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *guard = Some(delta.to_vec()),
        }
    }

    /// Largest absolute difference between two equally-shaped tensors.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> f64 {
        let a = self.inner.data.read().expect("tensor data lock");
        let b = other.inner.data.read().expect("tensor data lock");
        debug_assert_eq!(a.len(), b.len());
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (Element::to_f64(*x) - Element::to_f64(*y)).abs())
            .fold(0.0, f64::max)
    }

    /// Bit patterns of the current values; used for frozen-weight snapshots.
    pub fn data_bits(&self) -> Vec<u64> {
        self.with_data(|d| {
            d.iter()
                .map(|v| {
                    let mut bytes = Vec::with_capacity(8);
                    v.write_le(&mut bytes);
                    bytes.resize(8, 0);
                    u64::from_le_bytes(bytes.try_into().expect("8 bytes"))
                })
                .collect()
        })
    }
}
