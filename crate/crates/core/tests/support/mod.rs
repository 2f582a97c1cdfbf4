//! Naive reference implementations shared by the kernel, FROC and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s4nd_core::froc::{Candidate, TruthCell};
use s4nd_core::tensor::{
    avgpool3d, batchnorm, concat_channels, conv3d, conv3d_direct, maxpool3d, relu, sigmoid, BatchNormMode,
    BatchNormState, ConvParams, Pool3d,
};
use s4nd_core::Tensor;

pub fn random_tensor(rng: &mut impl Rng, shape: [usize; 5]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Seven nested loops over (n, co, z, y, x) and (ci, kd, kh, kw), accumulating
/// from zero in that order and adding the bias last.
pub fn conv_oracle(x: &Tensor, w: &Tensor, bias: &[f64], p: &ConvParams) -> Tensor {
    let [n, ci, d, h, wd] = x.dims5().unwrap();
    let [od, oh, ow] = p.output_extent([d, h, wd]).unwrap();
    let co = p.out_channels;
    let [kd, kh, kw] = p.kernel;
    let mut out = Tensor::zeros(vec![n, co, od, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = (z * p.stride[0] + a) as isize - p.padding[0] as isize;
                                        let iy = (y * p.stride[1] + bb) as isize - p.padding[1] as isize;
                                        let ix = (xx * p.stride[2] + cc) as isize - p.padding[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += x.get(&[b, c, iz as usize, iy as usize, ix as usize]) * w.get(&[o, c, a, bb, cc]);
                                    }
                                }
                            }
                        }
                        out.set(&[b, o, z, y, xx], acc + bias[o]);
                    }
                }
            }
        }
    }
    out
}

pub fn random_conv_case(rng: &mut impl Rng) -> (Tensor, Tensor, Vec<f64>, ConvParams) {
    let ci = rng.gen_range(1..4);
    let co = rng.gen_range(1..5);
    let kernel = [rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
    let stride = [rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3)];
    let padding = [0, 1, 2].map(|a| rng.gen_range(0..kernel[a].max(1)));
    let dims = [0, 1, 2].map(|a| rng.gen_range(kernel[a]..kernel[a] + 6));
    let p = ConvParams::new(ci, co, kernel).with_stride(stride).with_padding(padding);
    let n = rng.gen_range(1..3);
    let x = random_tensor(rng, [n, ci, dims[0], dims[1], dims[2]]);
    let w = random_tensor(rng, p.weight_shape());
    let bias = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (x, w, bias, p)
}

/// Visits every window of `pool` in (kd, kh, kw) order and reduces it.
pub fn window_oracle(x: &Tensor, pool: &Pool3d, reduce: impl Fn(&[f64]) -> f64) -> Tensor {
    let [n, c, d, h, w] = x.dims5().unwrap();
    let [od, oh, ow] = pool.output_extent([d, h, w]).unwrap();
    let mut out = Tensor::zeros(vec![n, c, od, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut vals = Vec::new();
                        for a in 0..pool.kernel[0] {
                            for bb in 0..pool.kernel[1] {
                                for cc in 0..pool.kernel[2] {
                                    vals.push(x.get(&[
                                        b,
                                        ch,
                                        z * pool.stride[0] + a,
                                        y * pool.stride[1] + bb,
                                        xx * pool.stride[2] + cc,
                                    ]));
                                }
                            }
                        }
                        out.set(&[b, ch, z, y, xx], reduce(&vals));
                    }
                }
            }
        }
    }
    out
}

pub fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn mean_of(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in v {
        s += x;
    }
    s / v.len() as f64
}

pub fn random_pool_case(rng: &mut impl Rng) -> (Tensor, Pool3d) {
    let kernel = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4)];
    let stride = [0, 1, 2].map(|a| rng.gen_range(1..=kernel[a]));
    let dims = [0, 1, 2].map(|a| rng.gen_range(kernel[a]..kernel[a] + 7));
    let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..4));
    let x = random_tensor(rng, [n, c, dims[0], dims[1], dims[2]]);
    (x, Pool3d::new(kernel, stride))
}

/// Training-mode batch norm: two passes per channel in (batch, voxel) order,
/// then `(x - mean) * (1 / sqrt(var + eps)) * gamma + beta`.
pub fn batchnorm_oracle(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let [n, c, d, h, w] = x.dims5().unwrap();
    let vox = d * h * w;
    let mut out = x.clone();
    for ch in 0..c {
        let at = |b: usize, i: usize| x.data()[(b * c + ch) * vox + i];
        let m = (n * vox) as f64;
        let mut s = 0.0;
        for b in 0..n {
            for i in 0..vox {
                s += at(b, i);
            }
        }
        let mean = s / m;
        let mut ss = 0.0;
        for b in 0..n {
            for i in 0..vox {
                ss += (at(b, i) - mean) * (at(b, i) - mean);
            }
        }
        let inv = 1.0 / (ss / m + eps).sqrt();
        for b in 0..n {
            for i in 0..vox {
                out.data_mut()[(b * c + ch) * vox + i] = (at(b, i) - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

/// Draws `draws` random cases per forward kernel and compares each against its
/// oracle bit for bit. Returns the first mismatch.
pub fn kernel_oracle_suite(seed: u64, draws: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut expect = |name: &str, draw: usize, ok: bool| {
        checked += 1;
        if ok {
            Ok(())
        } else {
            Err(format!("{name} draw {draw} differs from its oracle"))
        }
    };
    for draw in 0..draws {
        let (x, w, bias, p) = random_conv_case(&mut rng);
        let want = conv_oracle(&x, &w, &bias, &p);
        expect("conv3d", draw, conv3d(&x, &w, Some(&bias), &p).unwrap() == want)?;
        expect("conv3d_direct", draw, conv3d_direct(&x, &w, Some(&bias), &p).unwrap() == want)?;

        let (x, pool) = random_pool_case(&mut rng);
        expect("maxpool3d", draw, maxpool3d(&x, &pool).unwrap().0 == window_oracle(&x, &pool, max_of))?;
        expect("avgpool3d", draw, avgpool3d(&x, &pool).unwrap() == window_oracle(&x, &pool, mean_of))?;

        let shape = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(2..5)];
        let x = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-3.0..5.0));
        let gamma: Vec<f64> = (0..shape[1]).map(|_| rng.gen_range(0.5..2.0)).collect();
        let beta: Vec<f64> = (0..shape[1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut state = BatchNormState::new(shape[1], 0.9);
        let y = batchnorm(&x, &gamma, &beta, &mut state, BatchNormMode::Train, 1e-5).unwrap().output;
        expect("batchnorm", draw, y == batchnorm_oracle(&x, &gamma, &beta, 1e-5))?;

        let [n, d, h, w] = [rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4)];
        let parts: Vec<Tensor> = (0..rng.gen_range(1..4))
            .map(|_| {
                let c = rng.gen_range(1..4);
                random_tensor(&mut rng, [n, c, d, h, w])
            })
            .collect();
        let y = concat_channels(&parts.iter().collect::<Vec<_>>()).unwrap();
        let mut want = Vec::new();
        for b in 0..n {
            for p in &parts {
                let plane = p.len() / n;
                want.extend_from_slice(&p.data()[b * plane..(b + 1) * plane]);
            }
        }
        expect("concat", draw, y.data() == want.as_slice())?;

        let x = Tensor::from_fn(vec![1, 2, 2, 3, 3], |_| rng.gen_range(-30.0..30.0));
        let r: Vec<f64> = x.data().iter().map(|&v: &f64| if v > 0.0 { v } else { 0.0 }).collect();
        let s: Vec<f64> = x
            .data()
            .iter()
            .map(|&v: &f64| if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) })
            .collect();
        expect("relu", draw, relu(&x).data() == r.as_slice())?;
        expect("sigmoid", draw, sigmoid(&x).data() == s.as_slice())?;
    }
    Ok(checked)
}

/// Recounts true and false positives from scratch at every distinct threshold
/// and prepends the zero-false-positive point.
pub fn froc_oracle(cands: &[Candidate], gt: &[TruthCell], scans: usize) -> Vec<(f64, f64)> {
    let thresholds: BTreeSet<u64> = cands.iter().map(|c| c.confidence.to_bits()).collect();
    let mut ts: Vec<f64> = thresholds.into_iter().map(f64::from_bits).collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    let on_gt = |c: &Candidate| gt.iter().any(|t| t.scan_id == c.scan_id && t.cell == c.cell());
    let mut pts = Vec::new();
    for &tau in &ts {
        let kept: Vec<&Candidate> = cands.iter().filter(|c| c.confidence >= tau).collect();
        let fp = kept.iter().filter(|c| !on_gt(c)).count();
        let tp = gt
            .iter()
            .filter(|t| kept.iter().any(|c| c.scan_id == t.scan_id && c.cell() == t.cell))
            .count();
        pts.push((fp as f64 / scans as f64, tp as f64 / gt.len() as f64));
    }
    let first = pts.first().map_or(0.0, |p| p.1);
    pts.insert(0, (0.0, first));
    pts
}

/// Linear interpolation of oracle points at `rate`, upper value at vertical steps.
pub fn interpolate(points: &[(f64, f64)], rate: f64) -> f64 {
    let mut value = 0.0;
    for (i, &(x, y)) in points.iter().enumerate() {
        if x > rate {
            let (x0, y0) = points[i - 1];
            return y0 + (y - y0) * (rate - x0) / (x - x0);
        }
        value = y;
    }
    value
}

pub fn truth(scan: &str, id: usize, cell: [usize; 3]) -> TruthCell {
    TruthCell { scan_id: scan.into(), nodule_id: id, cell }
}

/// Up to three nodules per scan on a 4 x 4 x 3 grid and up to 30 distinct
/// candidate cells with confidences on a coarse lattice, so ties occur.
pub fn random_froc_instance(rng: &mut impl Rng, scans: usize) -> (Vec<Candidate>, Vec<TruthCell>) {
    let mut gt = Vec::new();
    let mut id = 0;
    for s in 0..scans {
        for _ in 0..rng.gen_range(0..4) {
            gt.push(truth(&format!("s{s}"), id, [rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..3)]));
            id += 1;
        }
    }
    if gt.is_empty() {
        gt.push(truth("s0", id, [0, 0, 0]));
    }
    let mut used = HashSet::new();
    let mut cands = Vec::new();
    for _ in 0..rng.gen_range(0..30) {
        let s = rng.gen_range(0..scans);
        let cell = [rng.gen_range(0..4), rng.gen_range(0..4), rng.gen_range(0..3)];
        if used.insert((s, cell)) {
            cands.push(Candidate::new(format!("s{s}"), cell, rng.gen_range(1..20) as f64 / 20.0));
        }
    }
    (cands, gt)
}
