//! Dense multi-dimensional float arrays plus the handful of differentiable
//! operations the decoder and shading need, the Adam optimizer, and a
//! finite-difference gradient checker. There is no general autograd tape:
//! each operation ships a hand-written backward.

pub mod gradcheck;
pub mod ops;
pub mod scalar;
pub mod store;

use crate::error::{Error, Result};
use scalar::Scalar;

/// Contiguous row-major multi-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", 0, numel, data.len()));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::data("tensor extents must be positive"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn fill(&mut self, value: S) {
        self.data.fill(value);
    }

    /// Extent along `axis`, or 1 when the axis is absent.
    pub fn extent(&self, axis: usize) -> usize {
        self.shape.get(axis).copied().unwrap_or(1)
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    entry: context.to_string(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    /// Cast element-wise through f64 (used to move between f32 and f64 modes).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| scalar::sc::<T>(v.to_f64_s()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_s()).collect()
    }
}

/// Index into a CHW tensor.
#[inline]
pub fn chw(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (c * h + y) * w + x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let r = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]);
        assert!(matches!(r, Err(Error::Shape { expected: 6, actual: 5, .. })));
    }

    #[test]
    fn validate_finite_names_index() {
        let mut t = Tensor::<f32>::zeros(vec![4]);
        t.data_mut()[2] = f32::NAN;
        match t.validate_finite("probe") {
            Err(Error::NonFinite { entry, index }) => {
                assert_eq!(entry, "probe");
                assert_eq!(index, 2);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
