use super::{Real, Tensor, AXIS_NAMES};
use crate::error::{Error, Result};

/// Pooling window geometry, `(depth, height, width)` order, no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pool3d {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

impl Pool3d {
    pub fn new(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Pool3d { kernel, stride }
    }

    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::Geometry(format!(
                "pool kernel {:?} and stride {:?} must be >= 1",
                self.kernel, self.stride
            )));
        }
        let mut out = [0; 3];
        for axis in 0..3 {
            if self.kernel[axis] > input[axis] {
                return Err(Error::Geometry(format!(
                    "pool window {} exceeds {} extent {}",
                    self.kernel[axis],
                    AXIS_NAMES[axis + 2],
                    input[axis]
                )));
            }
            out[axis] = (input[axis] - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }
}

fn for_each_window<T: Real>(
    input: &Tensor<T>,
    pool: &Pool3d,
    mut f: impl FnMut(&mut dyn Iterator<Item = usize>),
) -> Result<Vec<usize>> {
    let [n, c, d, h, w] = input.dims5()?;
    let [od, oh, ow] = pool.output_extent([d, h, w])?;
    let [kd, kh, kw] = pool.kernel;
    for plane in 0..n * c {
        let base = plane * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let (z0, y0, x0) = (z * pool.stride[0], y * pool.stride[1], x * pool.stride[2]);
                    let mut window = (0..kd).flat_map(move |a| {
                        (0..kh).flat_map(move |b| (0..kw).map(move |cc| base + ((z0 + a) * h + y0 + b) * w + x0 + cc))
                    });
                    f(&mut window);
                }
            }
        }
    }
    Ok(vec![n, c, od, oh, ow])
}

/// Max pooling. Returns the pooled tensor and, per output value, the linear input
/// index of the window maximum (lowest index on ties).
pub fn maxpool3d<T: Real>(input: &Tensor<T>, pool: &Pool3d) -> Result<(Tensor<T>, Vec<usize>)> {
    let x = input.data();
    let mut values = Vec::new();
    let mut argmax = Vec::new();
    let shape = for_each_window(input, pool, |window| {
        let first = window.next().expect("non-empty window");
        let (mut best, mut at) = (x[first], first);
        for i in window {
            if x[i] > best {
                best = x[i];
                at = i;
            }
        }
        values.push(best);
        argmax.push(at);
    })?;
    Ok((Tensor::new(shape, values)?, argmax))
}

/// Average pooling: window sum in scan order divided by the window size.
pub fn avgpool3d<T: Real>(input: &Tensor<T>, pool: &Pool3d) -> Result<Tensor<T>> {
    let x = input.data();
    let count = T::from_usize(pool.kernel.iter().product()).unwrap();
    let mut values = Vec::new();
    let shape = for_each_window(input, pool, |window| {
        let mut acc = T::zero();
        for i in window {
            acc = acc + x[i];
        }
        values.push(acc / count);
    })?;
    Tensor::new(shape, values)
}

pub(crate) fn maxpool3d_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::dim("pooled element", argmax.len(), grad_out.len()));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

pub(crate) fn avgpool3d_backward<T: Real>(input_shape: &[usize], pool: &Pool3d, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let mut dx = Tensor::<T>::zeros(input_shape.to_vec());
    let count = T::from_usize(pool.kernel.iter().product()).unwrap();
    let probe = Tensor::<T>::zeros(input_shape.to_vec());
    let dy = grad_out.data();
    let mut o = 0;
    let d = dx.data_mut();
    for_each_window(&probe, pool, |window| {
        let g = dy[o] / count;
        for i in window {
            d[i] += g;
        }
        o += 1;
    })?;
    if o != dy.len() {
        return Err(Error::dim("pooled element", o, dy.len()));
    }
    Ok(dx)
}
