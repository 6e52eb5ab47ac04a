//! Exact-arithmetic tensors and reverse-mode automatic differentiation.
//!
//! All math in this crate runs through here: plain row-major `f64` buffers,
//! a recording [`Tape`] that replays operations in reverse to accumulate
//! adjoints, and a finite-difference oracle that checks the tape without
//! sharing any code with it. No SIMD, no threads: a fixed serial evaluation
//! order is what makes whole training runs bitwise reproducible.

mod kernels;

pub mod gradcheck;
pub mod tape;

pub use gradcheck::{finite_difference_grad, max_rel_err, max_rel_err_with_floor};
pub use tape::{Gradients, Tape, TensorId};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    WrongShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: index {index} out of bounds for axis of size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: non-finite value {value} at flat index {index}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("finite-difference step {eps} outside (0, 0.01]")]
    BadEpsilon { eps: f64 },
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Owned row-major `f64` buffer with an optional gradient of the same shape.
///
/// A scalar is the empty shape `[]`. Gradient buffers are created lazily on
/// the first [`Tensor::accumulate_grad`] and add up across repeated backward
/// passes until [`Tensor::zero_grad`].
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel_of(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != numel_of(shape) {
            return Err(TensorError::LengthMismatch {
                op: "from_vec",
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Normal(0, std) init, drawn in flat index order from `rng`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and positive");
        let data = (0..numel_of(shape)).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a trainable leaf; tape leaves built from it will
    /// carry gradients.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `delta` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), TensorError> {
        if delta.len() != self.data.len() {
            return Err(TensorError::LengthMismatch {
                op: "accumulate_grad",
                shape: self.shape.clone(),
                len: delta.len(),
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Pulls this tensor's adjoint out of a backward result, if the graph
    /// reached it, and accumulates it.
    pub fn absorb(&mut self, grads: &Gradients, id: TensorId) -> Result<(), TensorError> {
        if let Some(adj) = grads.get(id) {
            self.accumulate_grad(adj)?;
        }
        Ok(())
    }
}
