//! Dense row-major tensor.
//!
//! Shape is a list of extents, batch axes leftmost, feature axis rightmost.
//! A tensor is immutable once constructed; operations build new tensors, so
//! sharing one read-only across evaluation workers is safe by construction.

use crate::error::{Error, Result};
use crate::numerics::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from row-major data. Zero-extent axes are allowed;
    /// the data length must equal the product of extents.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeExpectation {
                op: "from_vec",
                expected: format!("{expected} elements for shape {shape:?}"),
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Convenience constructor for tests and small fixtures.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidArgument(format!(
                    "from_rows: ragged rows ({} vs {c} columns)",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Extracts the single element of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeExpectation {
                op: "item",
                expected: "a one-element tensor".into(),
                got: self.shape.clone(),
            })
        }
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    /// Flat offset of a multi-index; debug-asserts bounds.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        let mut stride = 1;
        for axis in (0..self.shape.len()).rev() {
            debug_assert!(idx[axis] < self.shape[axis]);
            flat += idx[axis] * stride;
            stride *= self.shape[axis];
        }
        flat
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.flat_index(idx)]
    }

    /// Same data viewed under a new shape.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let to_len: usize = shape.iter().product();
        if to_len != self.data.len() {
            return Err(Error::BadReshape {
                from: self.shape.clone(),
                from_len: self.data.len(),
                to: shape,
                to_len,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Euclidean norm of the flattened data, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

}

impl Tensor<f64> {
    /// Lossy precision cast used when emitting reports from generic code.
    pub fn from_scalar_tensor<T: Scalar>(src: &Tensor<T>) -> Self {
        Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|v| v.as_f64()).collect(),
        }
    }
}

/// Walks a shape's multi-indices in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    let len: usize = shape.iter().product();
    if len == 0 {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        // Advance like an odometer, least-significant axis last.
        let mut axis = shape.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}
