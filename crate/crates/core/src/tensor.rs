//! Dense n-dimensional tensors: immutable row-major arrays shared via `Arc`.
//!
//! Volumetric data uses the fixed `N C D H W` layout. Cloning a tensor is
//! cheap; all mutation happens by constructing a new tensor.

use std::fmt;
use std::sync::Arc;

use crate::error::TensorError;

/// Element dtype tag, used by the binary container and error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
    U16,
}

impl Dtype {
    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
        }
    }

    pub fn from_name(name: &str) -> Option<Dtype> {
        match name {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            "u8" => Some(Dtype::U8),
            "u16" => Some(Dtype::U16),
            _ => None,
        }
    }
}

/// Floating-point element type of the engine. `f32` is the training default;
/// `f64` backs gradient checking and the high-precision oracles.
pub trait Scalar:
    num_traits::Float + std::iter::Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Immutable dense tensor. `shape.iter().product() == data.len()` always holds.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![v; numel]),
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Same data, new shape with identical element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                len: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type, e.g. promote `f32` tensors to `f64` for checking.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|&v| U::from_f64(v.as_f64()))
                    .collect(),
            ),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}

/// Row-major strides for a shape.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    let mut acc = 1usize;
    for (i, &dim) in shape.iter().enumerate().rev() {
        strides[i] = acc;
        acc *= dim;
    }
    strides
}

/// Decompose a flat row-major index into per-axis coordinates.
pub fn unravel(mut idx: usize, shape: &[usize]) -> Vec<usize> {
    let mut coords = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        coords[d] = idx % shape[d];
        idx /= shape[d];
    }
    coords
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_tensor() {
        let t = Tensor::<f64>::scalar(3.5);
        assert!(t.is_scalar());
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.item(), 3.5);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_for(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(unravel(17, &[2, 3, 4]), vec![1, 1, 1]);
    }

    #[test]
    fn cast_roundtrip() {
        let t = Tensor::<f32>::from_vec(vec![3], vec![1.0, -2.5, 0.25]).unwrap();
        let d: Tensor<f64> = t.cast();
        assert_eq!(d.data(), &[1.0, -2.5, 0.25]);
    }
}
