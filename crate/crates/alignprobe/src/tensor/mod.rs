//! Dense tensors with reverse-mode differentiation and the Adam optimizer.
//!
//! [`TensorF`] is a plain row-major `f64` buffer with an optional gradient
//! slot. Differentiable computations are recorded on a [`tape::Tape`]; calling
//! [`tape::Tape::backward`] yields gradients that callers accumulate back into
//! their parameter tensors. Compute is double precision throughout; only
//! checkpoints on disk are single precision.

mod adam;
mod gradcheck;
pub mod ops;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use gradcheck::grad_check;

use thiserror::Error;

/// Errors from tensor construction and tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: dims {dims:?} imply {expected} values, got {got}")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got dims {dims:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        dims: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank-{rank} tensor")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range ({bound} available)")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: parameter has no gradient")]
    MissingGrad { op: &'static str },
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
}

/// Dense real-valued tensor: row-major values plus an optional gradient
/// buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF {
    dims: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl TensorF {
    /// Builds a tensor, checking that `dims` and `values` agree.
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            dims,
            values,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        Self {
            dims,
            values: vec![0.0; len],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            dims: vec![],
            values: vec![v],
            grad: None,
        }
    }

    /// Rank-2 tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![row.len()],
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The scalar payload of a rank-0 / single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    /// Rows of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.dims[1];
        &self.values[i * cols..(i + 1) * cols]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let len = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient slot. Shapes must match.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), TensorError> {
        if delta.len() != self.values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.dims.clone(),
                rhs: vec![delta.len()],
            });
        }
        let grad = self.grad_mut();
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute difference between two same-shape tensors.
    pub fn max_abs_diff(&self, other: &TensorF) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(TensorF::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = TensorF::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { .. }));
    }

    #[test]
    fn grad_accumulates() {
        let mut t = TensorF::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn grad_shape_checked() {
        let mut t = TensorF::zeros(vec![3]);
        assert!(t.accumulate_grad(&[0.0; 4]).is_err());
    }
}
