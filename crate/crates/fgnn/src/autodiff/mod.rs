//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! The engine is define-by-run: every forward pass records its operations
//! onto a fresh [`Tape`], which owns all intermediate buffers. Calling
//! [`Tape::backward`] replays the recording in reverse and accumulates
//! vector-Jacobian products into per-node gradient slots. Long-lived
//! values (model parameters) live outside the tape as plain [`Tensor`]s
//! and are bound onto a tape as leaves for the duration of one pass.
//!
//! Everything is 64-bit floats in flat row-major storage.

mod gradcheck;
mod tape;

pub use gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
pub use tape::{Tape, TensorId};

use crate::error::{FgnnError, Result};

/// A dense numeric array: shape, flat row-major values, and an optional
/// gradient of the same length. Parameters set `requires_grad` so tapes
/// know to produce gradients for them.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() || shape.is_empty() {
            return Err(FgnnError::Contract(format!(
                "tensor shape {:?} does not describe {} values",
                shape,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-1 scalar, shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Column vector, shape `[n, 1]`.
    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Tensor {
            shape: vec![n, 1],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    /// Builder-style marker: this tensor is a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Row count; rank-1 tensors are treated as a single column.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Additively merge a gradient contribution; allocates the slot on
    /// first use. Accumulation is explicit — see [`Tensor::zero_grad`].
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(
            delta.len(),
            self.values.len(),
            "gradient length {} does not match tensor of {} values",
            delta.len(),
            self.values.len()
        );
        match &mut self.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
