use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{
    avgpool3d, avgpool3d_backward, batchnorm, batchnorm_backward, concat_channels, conv3d, conv3d_backward,
    maxpool3d, maxpool3d_backward, relu, sigmoid, BatchNormMode, BatchNormState, ConvParams, Pool3d, Real, Tensor,
};

/// A value recorded on a [`Tape`].
#[derive(Clone, Debug)]
pub struct Var<T = f64> {
    id: usize,
    epoch: u64,
    value: Arc<Tensor<T>>,
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }
}

enum Op<T> {
    Constant,
    Input,
    Param(ParamId),
    Conv {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        params: ConvParams,
        x: Arc<Tensor<T>>,
        w: Arc<Tensor<T>>,
    },
    MaxPool {
        input: usize,
        in_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: usize,
        in_shape: Vec<usize>,
        pool: Pool3d,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        gamma_value: Vec<T>,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        mode: BatchNormMode,
    },
    Relu {
        input: usize,
        x: Arc<Tensor<T>>,
    },
    Sigmoid {
        input: usize,
        y: Arc<Tensor<T>>,
    },
    Concat {
        inputs: Vec<usize>,
        channels: Vec<usize>,
    },
    Mul {
        a: usize,
        b: usize,
        av: Arc<Tensor<T>>,
        bv: Arc<Tensor<T>>,
    },
    Sum {
        input: usize,
        shape: Vec<usize>,
    },
    /// Scalar loss whose gradient with respect to `input` was computed by the caller.
    Loss {
        input: usize,
        grad: Tensor<T>,
    },
}

/// Gradients of non-parameter inputs registered with [`Tape::input`].
#[derive(Debug, Default)]
pub struct Gradients<T = f64> {
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.by_node.get(&var.id)
    }
}

/// Records operations during a forward pass and replays them in reverse.
///
/// The tape is cleared by [`Tape::backward`]; any [`Var`] created before that
/// belongs to an expired recording and is rejected afterwards.
pub struct Tape<T = f64> {
    nodes: Vec<Op<T>>,
    epoch: u64,
    recording: bool,
    conv_weight_fault: Option<T>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            epoch: 0,
            recording: true,
            conv_weight_fault: None,
        }
    }

    /// A tape that evaluates operations without saving anything for backward.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Discards the recording without running backward.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.epoch += 1;
    }

    /// Scales every convolution weight gradient by `factor`. Exists only so the
    /// gradient checker can demonstrate that it detects a broken backward pass.
    #[doc(hidden)]
    pub fn corrupt_conv_weight_grad(&mut self, factor: T) {
        self.conv_weight_fault = Some(factor);
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var<T> {
        self.push_shared(op, Arc::new(value))
    }

    fn push_shared(&mut self, op: Op<T>, value: Arc<Tensor<T>>) -> Var<T> {
        if !self.recording {
            return Var {
                id: usize::MAX,
                epoch: self.epoch,
                value,
            };
        }
        self.nodes.push(op);
        Var {
            id: self.nodes.len() - 1,
            epoch: self.epoch,
            value,
        }
    }

    fn check(&self, v: &Var<T>) -> Result<usize> {
        if v.epoch != self.epoch || (self.recording && v.id >= self.nodes.len()) {
            return Err(Error::State("variable belongs to an expired or foreign tape recording".into()));
        }
        Ok(v.id)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var<T> {
        self.push(Op::Constant, value)
    }

    /// A value whose gradient is reported in [`Gradients`].
    pub fn input(&mut self, value: Tensor<T>) -> Var<T> {
        self.push(Op::Input, value)
    }

    /// A parameter whose gradient accumulates into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        self.push_shared(Op::Param(id), store.value_arc(id))
    }

    pub fn conv3d(&mut self, x: &Var<T>, w: &Var<T>, bias: Option<&Var<T>>, params: &ConvParams) -> Result<Var<T>> {
        let input = self.check(x)?;
        let weight = self.check(w)?;
        let bias_id = bias.map(|b| self.check(b)).transpose()?;
        let out = conv3d(&x.value, &w.value, bias.map(|b| b.value.data()), params)?;
        Ok(self.push(
            Op::Conv {
                input,
                weight,
                bias: bias_id,
                params: *params,
                x: x.shared(),
                w: w.shared(),
            },
            out,
        ))
    }

    pub fn maxpool3d(&mut self, x: &Var<T>, pool: &Pool3d) -> Result<Var<T>> {
        let input = self.check(x)?;
        let (out, argmax) = maxpool3d(&x.value, pool)?;
        Ok(self.push(
            Op::MaxPool {
                input,
                in_shape: x.shape().to_vec(),
                argmax,
            },
            out,
        ))
    }

    pub fn avgpool3d(&mut self, x: &Var<T>, pool: &Pool3d) -> Result<Var<T>> {
        let input = self.check(x)?;
        let out = avgpool3d(&x.value, pool)?;
        Ok(self.push(
            Op::AvgPool {
                input,
                in_shape: x.shape().to_vec(),
                pool: *pool,
            },
            out,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        state: &mut BatchNormState<T>,
        mode: BatchNormMode,
        eps: T,
    ) -> Result<Var<T>> {
        let input = self.check(x)?;
        let g = self.check(gamma)?;
        let b = self.check(beta)?;
        let out = batchnorm(&x.value, gamma.value.data(), beta.value.data(), state, mode, eps)?;
        Ok(self.push(
            Op::BatchNorm {
                input,
                gamma: g,
                beta: b,
                gamma_value: gamma.value.data().to_vec(),
                xhat: out.xhat,
                inv_std: out.inv_std,
                mode,
            },
            out.output,
        ))
    }

    pub fn relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let input = self.check(x)?;
        let out = relu(&x.value);
        Ok(self.push(Op::Relu { input, x: x.shared() }, out))
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let input = self.check(x)?;
        let out = Arc::new(sigmoid(&x.value));
        Ok(self.push_shared(
            Op::Sigmoid {
                input,
                y: Arc::clone(&out),
            },
            out,
        ))
    }

    pub fn concat(&mut self, xs: &[&Var<T>]) -> Result<Var<T>> {
        let inputs = xs.iter().map(|x| self.check(x)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor<T>> = xs.iter().map(|x| x.value()).collect();
        let out = concat_channels(&values)?;
        let channels = values.iter().map(|v| v.channels()).collect();
        Ok(self.push(Op::Concat { inputs, channels }, out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let out = a.value.zip_map(&b.value, |p, q| p * q)?;
        Ok(self.push(
            Op::Mul {
                a: ai,
                b: bi,
                av: a.shared(),
                bv: b.shared(),
            },
            out,
        ))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let input = self.check(x)?;
        let out = Tensor::scalar(x.value.sum());
        Ok(self.push(
            Op::Sum {
                input,
                shape: x.shape().to_vec(),
            },
            out,
        ))
    }

    /// Records a scalar loss `value` of `x` whose gradient `grad` is supplied by the caller.
    pub fn loss(&mut self, x: &Var<T>, value: T, grad: Tensor<T>) -> Result<Var<T>> {
        let input = self.check(x)?;
        if grad.shape() != x.shape() {
            return Err(Error::dim("loss gradient", x.value.len(), grad.len()));
        }
        Ok(self.push(Op::Loss { input, grad }, Tensor::scalar(value)))
    }

    /// Back-propagates from a scalar `loss`, accumulating parameter gradients into
    /// `store`, then clears the tape.
    pub fn backward(&mut self, loss: &Var<T>, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::State("backward called on an inference tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        let root = self.check(loss)?;
        if loss.value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.epoch += 1;

        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.shape().to_vec(), T::one()));
        let mut result = Gradients::default();

        for (id, op) in nodes.into_iter().enumerate().take(root + 1).rev() {
            let Some(g) = grads[id].take() else { continue };
            match op {
                Op::Constant => {}
                Op::Input => {
                    result.by_node.insert(id, g);
                }
                Op::Param(pid) => store.grad_mut(pid).add_assign(&g)?,
                Op::Conv {
                    input,
                    weight,
                    bias,
                    params,
                    x,
                    w,
                } => {
                    let cg = conv3d_backward(&x, &w, &params, &g)?;
                    drop(x);
                    let mut dw = cg.weight;
                    if let Some(f) = self.conv_weight_fault {
                        dw.data_mut().iter_mut().for_each(|v| *v *= f);
                    }
                    accumulate(&mut grads, input, cg.input)?;
                    accumulate(&mut grads, weight, dw)?;
                    if let Some(b) = bias {
                        let n = cg.bias.len();
                        accumulate(&mut grads, b, Tensor::new(vec![n], cg.bias)?)?;
                    }
                }
                Op::MaxPool { input, in_shape, argmax } => {
                    accumulate(&mut grads, input, maxpool3d_backward(&in_shape, &argmax, &g)?)?;
                }
                Op::AvgPool { input, in_shape, pool } => {
                    accumulate(&mut grads, input, avgpool3d_backward(&in_shape, &pool, &g)?)?;
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    gamma_value,
                    xhat,
                    inv_std,
                    mode,
                } => {
                    let (dx, dg, db) = batchnorm_backward(&xhat, &inv_std, &gamma_value, mode, &g)?;
                    let c = dg.len();
                    accumulate(&mut grads, input, dx)?;
                    accumulate(&mut grads, gamma, Tensor::new(vec![c], dg)?)?;
                    accumulate(&mut grads, beta, Tensor::new(vec![c], db)?)?;
                }
                Op::Relu { input, x } => {
                    let dx = x.zip_map(&g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })?;
                    accumulate(&mut grads, input, dx)?;
                }
                Op::Sigmoid { input, y } => {
                    let dx = y.zip_map(&g, |yv, gv| gv * yv * (T::one() - yv))?;
                    accumulate(&mut grads, input, dx)?;
                }
                Op::Concat { inputs, channels } => {
                    let mut start = 0;
                    for (src, c) in inputs.into_iter().zip(channels) {
                        accumulate(&mut grads, src, g.slice_channels(start, c)?)?;
                        start += c;
                    }
                }
                Op::Mul { a, b, av, bv } => {
                    accumulate(&mut grads, a, bv.zip_map(&g, |q, gv| q * gv)?)?;
                    accumulate(&mut grads, b, av.zip_map(&g, |p, gv| p * gv)?)?;
                }
                Op::Sum { input, shape } => {
                    accumulate(&mut grads, input, Tensor::full(shape, g.data()[0]))?;
                }
                Op::Loss { input, grad } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, input, grad.map(|v| v * s))?;
                }
            }
        }
        Ok(result)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) -> Result<()> {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
