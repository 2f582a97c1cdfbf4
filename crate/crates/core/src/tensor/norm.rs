use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Infer,
}

/// Running statistics of one batch-norm layer.
///
/// After each training batch: `running = momentum * running + (1 - momentum) * batch`.
/// The running variance tracks the unbiased batch variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize, momentum: T) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
        }
    }
}

pub struct BatchNormOutput<T> {
    pub output: Tensor<T>,
    /// Normalized input before the affine transform.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel normalization over `(batch, depth, height, width)`.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    state: &mut BatchNormState<T>,
    mode: BatchNormMode,
    eps: T,
) -> Result<BatchNormOutput<T>> {
    let [n, c, d, h, w] = input.dims5()?;
    if gamma.len() != c {
        return Err(Error::dim("gamma", c, gamma.len()));
    }
    if beta.len() != c {
        return Err(Error::dim("beta", c, beta.len()));
    }
    if state.running_mean.len() != c || state.running_var.len() != c {
        return Err(Error::dim("running statistics", c, state.running_mean.len()));
    }
    if !(eps > T::zero()) {
        return Err(Error::Config("batch-norm epsilon must be positive".into()));
    }
    let vox = d * h * w;
    let count = n * vox;
    if count == 0 {
        return Err(Error::Geometry("batch norm over an empty spatial volume".into()));
    }
    let m = T::from_usize(count).unwrap();
    let x = input.data();
    let plane = |b: usize, ch: usize| &x[(b * c + ch) * vox..(b * c + ch + 1) * vox];

    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, var) = match mode {
            BatchNormMode::Train => {
                let mut s = T::zero();
                for b in 0..n {
                    for &v in plane(b, ch) {
                        s = s + v;
                    }
                }
                let mu = s / m;
                let mut ss = T::zero();
                for b in 0..n {
                    for &v in plane(b, ch) {
                        let dv = v - mu;
                        ss = ss + dv * dv;
                    }
                }
                let var = ss / m;
                let mom = state.momentum;
                let unbiased = if count > 1 { ss / (m - T::one()) } else { var };
                state.running_mean[ch] = mom * state.running_mean[ch] + (T::one() - mom) * mu;
                state.running_var[ch] = mom * state.running_var[ch] + (T::one() - mom) * unbiased;
                (mu, var)
            }
            BatchNormMode::Infer => (state.running_mean[ch], state.running_var[ch]),
        };
        mean[ch] = mu;
        inv_std[ch] = T::one() / (var + eps).sqrt();
    }

    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * vox;
            for i in base..base + vox {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = xh * gamma[ch] + beta[ch];
            }
        }
    }
    Ok(BatchNormOutput {
        output: Tensor::new(input.shape().to_vec(), out)?,
        xhat: Tensor::new(input.shape().to_vec(), xhat)?,
        inv_std,
    })
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn batchnorm_backward<T: Real>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    mode: BatchNormMode,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let [n, c, d, h, w] = xhat.dims5()?;
    if grad_out.shape() != xhat.shape() {
        return Err(Error::dim("batch-norm gradient", xhat.len(), grad_out.len()));
    }
    let vox = d * h * w;
    let m = T::from_usize(n * vox).unwrap();
    let xh = xhat.data();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * vox;
            for i in base..base + vox {
                dgamma[ch] += dy[i] * xh[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * vox;
            let scale = gamma[ch] * inv_std[ch];
            match mode {
                BatchNormMode::Train => {
                    // dxhat = dy * gamma; sums over dxhat reduce to gamma * (dbeta, dgamma)
                    for i in base..base + vox {
                        dx[i] = scale / m * (m * dy[i] - dbeta[ch] - xh[i] * dgamma[ch]);
                    }
                }
                BatchNormMode::Infer => {
                    for i in base..base + vox {
                        dx[i] = scale * dy[i];
                    }
                }
            }
        }
    }
    Ok((Tensor::new(xhat.shape().to_vec(), dx)?, dgamma, dbeta))
}
