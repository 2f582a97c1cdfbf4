use super::{Real, Tensor, AXIS_NAMES};
use crate::error::{Error, Result};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Logistic function, evaluated on the branch that never exponentiates a positive number.
#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Concatenates rank-5 tensors along the channel axis.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Validation("concat of an empty tensor list".into()))?;
    let [n, _, d, h, w] = first.dims5()?;
    let mut channels = 0;
    for t in inputs {
        let dims = t.dims5()?;
        for axis in [0, 2, 3, 4] {
            if dims[axis] != first.shape()[axis] {
                return Err(Error::dim(AXIS_NAMES[axis], first.shape()[axis], dims[axis]));
            }
        }
        channels += dims[1];
    }
    let vox = d * h * w;
    let mut data = Vec::with_capacity(n * channels * vox);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[b * c * vox..(b + 1) * c * vox]);
        }
    }
    Tensor::new(vec![n, channels, d, h, w], data)
}
