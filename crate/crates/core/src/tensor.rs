//! Dense row-major tensors over 64-bit floats.
//!
//! A [`Tensor`] is a flat value buffer plus a shape. Gradients, when present,
//! are a second buffer of the same length. All model arithmetic in this crate
//! runs through these tensors via the recording tape in [`crate::tape`].

use crate::tape::TensorError;

/// Dense N-dimensional array of `f64` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape { shape });
        }
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                data_len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 2-D convenience constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub(crate) fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows when viewed as `[rows, cols]`; the last axis is `cols`,
    /// all leading axes collapse into `rows`.
    pub fn rows_for_last_axis(&self) -> usize {
        let cols = *self.shape.last().expect("tensor has at least one axis");
        self.data.len() / cols
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Checks two shapes describe the same extents.
pub(crate) fn same_shape(a: &[usize], b: &[usize]) -> bool {
    a == b
}
