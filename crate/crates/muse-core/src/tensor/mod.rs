//! Dense-tensor numeric substrate with reverse-mode automatic differentiation.
//!
//! Values live in flat row-major buffers. A [`Tape`] records one forward pass;
//! [`Tape::backward`] replays the recorded local gradient rules in reverse and
//! returns a gradient per leaf. Tapes are per-pass objects, never global, so
//! independent evaluations can run concurrently over shared parameters.

pub mod grad_check;
pub mod kernels;
pub mod tape;

pub use grad_check::finite_diff_check;
pub use tape::{Grads, Tape, Var};

use crate::error::{MuseError, Result};

/// Element type of every tensor. 64-bit by default; the `f32` build feature
/// switches the whole substrate to 32-bit. Tests and gradient checks assume
/// the 64-bit build.
#[cfg(not(feature = "f32"))]
pub type Elem = f64;
#[cfg(feature = "f32")]
pub type Elem = f32;

/// Dense n-dimensional array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<Elem>,
    pub requires_grad: bool,
    /// Accumulated gradient, same layout as `data`. Filled in by
    /// [`crate::params::ParamStore::absorb_grads`] after a backward pass.
    pub grad: Option<Vec<Elem>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Elem>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MuseError::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(value: Elem) -> Self {
        Self { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_rows(rows: &[Vec<Elem>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(MuseError::Shape("ragged row lengths".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a 2-d matrix.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a rank-2 tensor");
        self.shape[0]
    }

    /// Number of columns when viewed as a 2-d matrix.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a rank-2 tensor");
        self.shape[1]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}
