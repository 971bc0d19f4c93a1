//! Dense row-major tensors and the forward/backward kernels the network needs.
//!
//! Volumes use the layout `[N, C, H, W, D]`: batch, channel, then the three
//! spatial axes with depth fastest.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod resize;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Real;

pub use conv::{conv3d, conv3d_backward, Conv3dGeometry};
pub use elementwise::{
    add, concat_channels, concat_last, matvec, matvec_backward, relu, sigmoid, slice_channels,
    slice_last, softmax_channels, softmax_channels_backward,
};
pub use norm::{batch_norm_backward, batch_norm_eval, batch_norm_train, batch_stats, BatchStats};
pub use pool::{maxpool3d, maxpool3d_backward, PoolOutput};
pub use resize::{resize_trilinear, resize_trilinear_backward};

/// Spatial triple `(H, W, D)`.
pub type Spatial = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        validate_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        validate_shape(shape)?;
        let len = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        validate_shape(shape)?;
        let len: usize = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape,
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Adds `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        ensure_same_shape(self, other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        ensure_same_shape(self, other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Interprets the tensor as `[N, C, H, W, D]`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape[..] {
            [n, c, h, w, d] => Ok([n, c, h, w, d]),
            _ => Err(shape_err!(
                "expected a 5-d [N, C, H, W, D] tensor, got {:?}",
                self.shape
            )),
        }
    }

    pub fn spatial(&self) -> Result<Spatial> {
        let [_, _, h, w, d] = self.dims5()?;
        Ok([h, w, d])
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(invalid!("tensor shape must have at least one axis"));
    }
    if let Some(axis) = shape.iter().position(|&e| e == 0) {
        return Err(shape_err!("extent of axis {} is zero in {:?}", axis, shape));
    }
    Ok(())
}

pub(crate) fn ensure_same_shape<T>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err!(
            "{}: shapes {:?} and {:?} differ",
            what,
            a.shape,
            b.shape
        ));
    }
    Ok(())
}
