use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Outcome of comparing analytic and central-difference gradients for one operation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    /// Maximum relative error per differentiated input, in argument order.
    pub per_input: Vec<f64>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.max_error() < threshold
    }
}

/// Compares the gradient of a scalar function of `inputs` against central
/// differences with step `eps`, perturbing every element of every input.
///
/// `f` records its computation on the given tape and returns a one-element result.
pub fn grad_check<F>(op: &str, inputs: &[Tensor<f64>], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    grad_check_with(op, inputs, eps, None, &mut f)
}

/// As [`grad_check`], with a fault factor applied to convolution weight gradients.
#[doc(hidden)]
pub fn grad_check_with<F>(
    op: &str,
    inputs: &[Tensor<f64>],
    eps: f64,
    conv_fault: Option<f64>,
    f: &mut F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    if let Some(k) = conv_fault {
        tape.corrupt_conv_weight_grad(k);
    }
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(&loss, &mut store)?;

    let mut eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<_> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs)?;
        Ok(out.value().data()[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic = grads.get(var).unwrap_or(&zeros);
        let mut worst = 0.0f64;
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!("{op}: non-finite finite difference at input {k}[{i}]")));
            }
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            checked += 1;
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        per_input,
        checked,
    })
}
