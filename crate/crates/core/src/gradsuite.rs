//! Finite-difference verification of every differentiable operation and of a whole network.

use rand::seq::index::sample;
use rand::Rng;

use crate::architecture::Network;
use crate::autograd::{grad_check_with, relative_error, GradCheckReport, ParamKind, Tape, Var};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::loss::{bce_on_tape, BceWeights};
use crate::rng::{self, Stream};
use crate::tensor::{BatchNormMode, BatchNormState, ConvParams, Pool3d, Tensor};

/// Threshold for elementary operations.
pub const OP_THRESHOLD: f64 = 1e-6;
/// Threshold for sampled parameters of a full network.
pub const NETWORK_THRESHOLD: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub report: GradCheckReport,
    pub threshold: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passes(self.threshold)
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values at least 0.05 apart so that no perturbation changes a max-pool argmax.
fn distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    Tensor::from_fn(shape.to_vec(), |i| order[i] as f64 * 0.05 - 0.5)
}

/// Values with `0.1 <= |x| <= 1`, away from the ReLU kink.
fn off_kink(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Contracts an output with fixed random weights so that every element's gradient differs.
fn project(tape: &mut Tape<f64>, y: &Var<f64>, weights: &Tensor<f64>) -> Result<Var<f64>> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, &w)?;
    tape.sum(&p)
}

fn check(
    name: &str,
    inputs: &[Tensor<f64>],
    out_shape: &[usize],
    fault: Option<f64>,
    rng: &mut impl Rng,
    mut f: impl FnMut(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
) -> Result<SuiteEntry> {
    let weights = uniform(out_shape, -1.0, 1.0, rng);
    let report = grad_check_with(name, inputs, EPS, fault, &mut |tape: &mut Tape<f64>, v: &[Var<f64>]| {
        let y = f(tape, v)?;
        project(tape, &y, &weights)
    })?;
    Ok(SuiteEntry {
        report,
        threshold: OP_THRESHOLD,
    })
}

/// Runs the elementary-operation checks. `conv_fault` scales convolution
/// weight gradients and exists to show that the suite catches a broken backward.
pub fn op_suite(seed: u64, conv_fault: Option<f64>) -> Result<Vec<SuiteEntry>> {
    let mut rng = rng::stream(seed, Stream::Init);
    let r = &mut rng;
    let mut out = Vec::new();

    let p = ConvParams::same(2, 3, [3, 3, 3]);
    let x = uniform(&[2, 2, 3, 4, 4], -1.0, 1.0, r);
    let w = uniform(&p.weight_shape(), -0.5, 0.5, r);
    let b = uniform(&[3], -0.5, 0.5, r);
    out.push(check("conv3d", &[x, w, b], &[2, 3, 3, 4, 4], conv_fault, r, |t, v| {
        t.conv3d(&v[0], &v[1], Some(&v[2]), &p)
    })?);

    let ps = ConvParams::same(2, 2, [3, 3, 3]).with_stride([1, 2, 2]);
    let x = uniform(&[1, 2, 2, 6, 6], -1.0, 1.0, r);
    let w = uniform(&ps.weight_shape(), -0.5, 0.5, r);
    out.push(check("conv3d_strided", &[x, w], &[1, 2, 2, 3, 3], conv_fault, r, |t, v| {
        t.conv3d(&v[0], &v[1], None, &ps)
    })?);

    let pool = Pool3d::new([1, 2, 2], [1, 2, 2]);
    let x = distinct(&[1, 2, 2, 4, 4], r);
    out.push(check("maxpool3d", &[x.clone()], &[1, 2, 2, 2, 2], None, r, |t, v| t.maxpool3d(&v[0], &pool))?);
    out.push(check("avgpool3d", &[x], &[1, 2, 2, 2, 2], None, r, |t, v| t.avgpool3d(&v[0], &pool))?);

    let x = uniform(&[2, 3, 2, 3, 3], -1.0, 2.0, r);
    let gamma = uniform(&[3], 0.5, 1.5, r);
    let beta = uniform(&[3], -0.5, 0.5, r);
    for (name, mode) in [("batchnorm_train", BatchNormMode::Train), ("batchnorm_infer", BatchNormMode::Infer)] {
        let mut state = BatchNormState::new(3, 0.9);
        state.running_mean = vec![0.1, -0.2, 0.3];
        state.running_var = vec![0.8, 1.2, 0.5];
        out.push(check(name, &[x.clone(), gamma.clone(), beta.clone()], x.shape(), None, r, |t, v| {
            let mut s = state.clone();
            t.batchnorm(&v[0], &v[1], &v[2], &mut s, mode, 1e-5)
        })?);
    }

    let x = off_kink(&[1, 2, 2, 3, 3], r);
    out.push(check("relu", &[x.clone()], x.shape(), None, r, |t, v| t.relu(&v[0]))?);
    out.push(check("sigmoid", &[x.clone()], x.shape(), None, r, |t, v| t.sigmoid(&v[0]))?);

    let a = uniform(&[1, 2, 2, 2, 2], -1.0, 1.0, r);
    let c = uniform(&[1, 3, 2, 2, 2], -1.0, 1.0, r);
    out.push(check("concat", &[a, c], &[1, 5, 2, 2, 2], None, r, |t, v| t.concat(&[&v[0], &v[1]]))?);

    let a = uniform(&[1, 1, 2, 2, 2], -1.0, 1.0, r);
    let c = uniform(&[1, 1, 2, 2, 2], -1.0, 1.0, r);
    out.push(check("mul", &[a, c], &[1, 1, 2, 2, 2], None, r, |t, v| t.mul(&v[0], &v[1]))?);

    let logits = uniform(&[1, 1, 2, 3, 3], -3.0, 3.0, r);
    let labels = Tensor::from_fn(vec![1, 1, 2, 3, 3], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    let weights = BceWeights {
        pos: 4.0,
        ..BceWeights::unit()
    };
    let report = grad_check_with("sigmoid_bce", &[logits], EPS, None, &mut |t: &mut Tape<f64>, v: &[Var<f64>]| {
        let p = t.sigmoid(&v[0])?;
        bce_on_tape(t, &p, &labels, &weights)
    })?;
    out.push(SuiteEntry {
        report,
        threshold: OP_THRESHOLD,
    });
    Ok(out)
}

/// Compares analytic and central-difference gradients of the weighted
/// cross-entropy loss of a whole network for `samples` randomly chosen
/// learnable scalars. Batch norm runs in training mode.
pub fn network_check(config: &NetworkConfig, samples: usize, seed: u64, conv_fault: Option<f64>) -> Result<SuiteEntry> {
    let mut net = Network::<f64>::build(config, seed)?;
    let mut rng = rng::stream(seed, Stream::Augment);
    let shape = net.input_shape(1);
    let x = uniform(&shape, 0.0, 1.0, &mut rng);
    let [_, t, s1, s0] = [1, net.geometry().output[0], net.geometry().output[1], net.geometry().output[2]];
    let labels = Tensor::from_fn(vec![1, 1, t, s1, s0], |_| if rng.gen_bool(0.1) { 1.0 } else { 0.0 });
    let weights = BceWeights {
        pos: 5.0,
        ..BceWeights::unit()
    };

    let loss_of = |net: &mut Network<f64>, tape: &mut Tape<f64>| -> Result<Var<f64>> {
        let xv = tape.constant(x.clone());
        let y = net.forward(tape, &xv, BatchNormMode::Train)?;
        bce_on_tape(tape, &y, &labels, &weights)
    };

    let mut tape = Tape::new();
    if let Some(k) = conv_fault {
        tape.corrupt_conv_weight_grad(k);
    }
    let loss = loss_of(&mut net, &mut tape)?;
    tape.backward(&loss, net.store_mut())?;

    let learnable: Vec<_> = net
        .store()
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Learnable)
        .map(|(id, p)| (id, p.value().len()))
        .collect();
    let total: usize = learnable.iter().map(|l| l.1).sum();
    if samples > total {
        return Err(Error::Config(format!("cannot sample {samples} of {total} parameters")));
    }
    let mut worst = 0.0f64;
    for flat in sample(&mut rng, total, samples).into_vec() {
        let mut k = flat;
        let (id, i) = learnable
            .iter()
            .find_map(|&(id, n)| {
                if k < n {
                    Some((id, k))
                } else {
                    k -= n;
                    None
                }
            })
            .expect("index within total");
        let analytic = net.store().grad(id).data()[i];
        let orig = net.store().value(id).data()[i];
        let eval = |v: f64, net: &mut Network<f64>| -> Result<f64> {
            net.store_mut().value_mut(id).data_mut()[i] = v;
            let mut t = Tape::inference();
            Ok(loss_of(net, &mut t)?.value().data()[0])
        };
        let up = eval(orig + EPS, &mut net)?;
        let down = eval(orig - EPS, &mut net)?;
        net.store_mut().value_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        let err = relative_error(analytic, numeric);
        log::debug!(
            "{}[{i}]: analytic {analytic:.6e} numeric {numeric:.6e} error {err:.2e}",
            net.store().get(id).name
        );
        worst = worst.max(err);
    }
    Ok(SuiteEntry {
        report: GradCheckReport {
            op: format!("network ({samples} sampled parameters)"),
            per_input: vec![worst],
            checked: samples,
        },
        threshold: NETWORK_THRESHOLD,
    })
}
