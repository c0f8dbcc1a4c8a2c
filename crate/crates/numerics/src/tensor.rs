//! Dense row-major tensors.

use crate::error::{NumericsError, Result};
use crate::real::Real;

/// A dense, contiguous, row-major tensor. Image-like data is laid out as
/// `[batch, channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::InvalidShape {
                shape: shape.to_vec(),
                reason: "every dimension must be at least 1",
            });
        }
        if numel(shape) != data.len() {
            return Err(NumericsError::InvalidShape {
                shape: shape.to_vec(),
                reason: "data length does not match the product of dimensions",
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        Self { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(NumericsError::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a rank-4 (N, C, H, W) tensor",
            }),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(NumericsError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Element at a rank-4 index.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (_, cs, h, w) = self.dims4().expect("rank-4 tensor");
        self.data[((n * cs + c) * h + y) * w + x]
    }

    pub fn set4(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let (_, cs, h, w) = self.dims4().expect("rank-4 tensor");
        self.data[((n * cs + c) * h + y) * w + x] = v;
    }

    /// Copy of sample `n` of a batched tensor, keeping a leading batch dimension of 1.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.numel() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self { shape, data: self.data[n * per..(n + 1) * per].to_vec() }
    }

    /// Stacks equally shaped tensors along a new (or existing size-1) batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or(NumericsError::InvalidShape {
            shape: vec![0],
            reason: "cannot stack an empty list",
        })?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(NumericsError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        if shape[0] == 1 {
            shape[0] = items.len();
        } else {
            shape.insert(0, items.len());
        }
        Ok(Self { shape, data })
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor::<f32>::new(&[1, 0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn stack_and_sample_roundtrip() {
        let a = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[1, 2, 2, 2], |i| -(i as f32));
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
        assert_eq!(s.sample(0), a);
        assert_eq!(s.sample(1), b);
    }
}
