//! Dense tensors and the forward numeric kernels of the detector.
//!
//! Volumetric tensors use the axis order `(batch, channels, depth, height, width)`
//! with width varying fastest. Depth is the slice (z) axis.

mod activation;
mod conv;
mod gemm;
mod norm;
mod pool;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use activation::{concat_channels, relu, sigmoid, sigmoid_scalar};
pub use conv::{conv3d, conv3d_direct, conv3d_im2col, conv3d_stride2_downsample, ConvAlgorithm, ConvParams};
pub(crate) use conv::conv3d_backward;
pub use norm::{batchnorm, BatchNormMode, BatchNormOutput, BatchNormState};
pub(crate) use norm::batchnorm_backward;
pub use pool::{avgpool3d, maxpool3d, Pool3d};
pub(crate) use pool::{avgpool3d_backward, maxpool3d_backward};

/// Floating-point element type of a tensor.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn of(v: f64) -> Self {
        v
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Dense row-major tensor with an explicit shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Geometry("tensor shape must have at least one axis".into()));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Geometry(format!("tensor axis {axis} has zero extent")));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking that `data` holds exactly `product(shape)` values.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::dim("data length", len, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    /// # Panics
    /// If any extent is zero.
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    /// # Panics
    /// If any extent is zero.
    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = check_shape(&shape).expect("invalid tensor shape");
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len = check_shape(&shape).expect("invalid tensor shape");
        Tensor {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
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

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The `(n, c, d, h, w)` extents of a rank-5 tensor.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[n, c, d, h, w] => Ok([n, c, d, h, w]),
            other => Err(Error::dim("rank", 5, other.len())),
        }
    }

    pub fn channels(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Row-major linear offset of a coordinate.
    ///
    /// # Panics
    /// If the coordinate rank or any component is out of range.
    pub fn offset(&self, coord: &[usize]) -> usize {
        assert_eq!(coord.len(), self.shape.len(), "coordinate rank mismatch");
        coord.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "coordinate {i} out of range for extent {d}");
            acc * d + i
        })
    }

    /// Inverse of [`Tensor::offset`].
    pub fn coord(&self, mut offset: usize) -> Vec<usize> {
        assert!(offset < self.data.len(), "offset out of range");
        let mut coord = vec![0; self.shape.len()];
        for (slot, &d) in coord.iter_mut().zip(&self.shape).rev() {
            *slot = offset % d;
            offset /= d;
        }
        coord
    }

    pub fn get(&self, coord: &[usize]) -> T {
        self.data[self.offset(coord)]
    }

    pub fn set(&mut self, coord: &[usize], value: T) {
        let at = self.offset(coord);
        self.data[at] = value;
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `[start, start + count)` of a rank-5 tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        let [n, c, d, h, w] = self.dims5()?;
        if count == 0 || start + count > c {
            return Err(Error::dim("channel", c, start + count));
        }
        let vox = d * h * w;
        let mut data = Vec::with_capacity(n * count * vox);
        for b in 0..n {
            let base = (b * c + start) * vox;
            data.extend_from_slice(&self.data[base..base + count * vox]);
        }
        Tensor::new(vec![n, count, d, h, w], data)
    }

    fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape.len() != other.shape.len() {
            return Err(Error::dim("rank", self.shape.len(), other.shape.len()));
        }
        for (axis, (&a, &b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(Error::dim(format!("axis {axis}"), a, b));
            }
        }
        Ok(())
    }
}

pub(crate) const AXIS_NAMES: [&str; 5] = ["batch", "channel", "depth", "height", "width"];
