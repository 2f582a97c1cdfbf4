use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s4nd_core::autograd::{grad_check, ParamKind, ParamStore, Sgd, SgdConfig, Tape, Var};
use s4nd_core::loss::{bce_on_tape, BceWeights};
use s4nd_core::tensor::{BatchNormMode, BatchNormState, ConvParams, Pool3d};
use s4nd_core::{Error, Result, Tensor};

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn project(t: &mut Tape, y: &Var, r: &Tensor) -> Result<Var> {
    let rv = t.constant(r.clone());
    let p = t.mul(y, &rv)?;
    t.sum(&p)
}

#[test]
fn conv3d_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let p = ConvParams::same(2, 2, [3, 3, 3]);
    let x = random(&mut rng, &[1, 2, 3, 4, 4], -1.0, 1.0);
    let w = random(&mut rng, &p.weight_shape(), -0.5, 0.5);
    let r = random(&mut rng, &[1, 2, 3, 4, 4], -1.0, 1.0);
    let report = grad_check("conv3d", &[x, w], 1e-5, |t, v| {
        let y = t.conv3d(&v[0], &v[1], None, &p)?;
        project(t, &y, &r)
    })
    .unwrap();
    assert!(report.max_error() < 1e-6, "{report:?}");
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = Tensor::from_fn(vec![1, 2, 2, 3, 3], |_| {
        let m: f64 = rng.gen_range(0.1..2.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    });
    let r = random(&mut rng, x.shape(), -1.0, 1.0);
    let report = grad_check("relu", &[x], 1e-5, |t, v| {
        let y = t.relu(&v[0])?;
        project(t, &y, &r)
    })
    .unwrap();
    assert!(report.max_error() < 1e-7, "{report:?}");
}

#[test]
fn sigmoid_bce_composite_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let logits = random(&mut rng, &[1, 1, 2, 4, 4], -3.0, 3.0);
    let labels = Tensor::from_fn(logits.shape().to_vec(), |i| (i % 5 == 0) as u8 as f64);
    let w = BceWeights { pos: 4.0, ..BceWeights::unit() };
    let report = grad_check("sigmoid_bce", &[logits], 1e-5, |t, v| {
        let p = t.sigmoid(&v[0])?;
        bce_on_tape(t, &p, &labels, &w)
    })
    .unwrap();
    assert!(report.max_error() < 1e-7, "{report:?}");
}

#[test]
fn batchnorm_train_gradient_wrt_input_gamma_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let x = random(&mut rng, &[2, 3, 2, 3, 3], -1.0, 2.0);
    let gamma = random(&mut rng, &[3], 0.5, 1.5);
    let beta = random(&mut rng, &[3], -0.5, 0.5);
    let r = random(&mut rng, x.shape(), -1.0, 1.0);
    let report = grad_check("batchnorm", &[x, gamma, beta], 1e-5, |t, v| {
        let mut state = BatchNormState::new(3, 0.9);
        let y = t.batchnorm(&v[0], &v[1], &v[2], &mut state, BatchNormMode::Train, 1e-5)?;
        project(t, &y, &r)
    })
    .unwrap();
    assert_eq!(report.per_input.len(), 3);
    assert!(report.max_error() < 1e-5, "{report:?}");
}

#[test]
fn momentum_two_steps_follow_hand_unrolled_recurrence() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::scalar(1.0), ParamKind::Learnable).unwrap();
    let mut sgd = Sgd::new(SgdConfig { momentum: 0.9, weight_decay: 0.0 }).unwrap();
    // Loss w^2 / 2 has gradient w.
    for _ in 0..2 {
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let sq = tape.mul(&w, &w).unwrap();
        let half = tape.constant(Tensor::scalar(0.5));
        let l = tape.mul(&sq, &half).unwrap();
        let l = tape.sum(&l).unwrap();
        tape.backward(&l, &mut store).unwrap();
        sgd.step(&mut store, 0.1).unwrap();
    }
    // v1 = 1, w1 = 0.9; v2 = 0.9 * 1 + 0.9 = 1.8, w2 = 0.9 - 0.18 = 0.72.
    let w = store.value(id).data()[0];
    assert!((w - 0.72).abs() < 1e-15, "{w}");
}

#[test]
fn backward_twice_is_rejected() {
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(vec![1, 1, 1, 2, 2], 1.5));
    let y = tape.relu(&x).unwrap();
    let l = tape.sum(&y).unwrap();
    tape.backward(&l, &mut store).unwrap();
    assert!(matches!(tape.backward(&l, &mut store), Err(Error::State(_))));
}

#[test]
fn inference_tape_refuses_backward() {
    let mut store = ParamStore::new();
    let mut tape = Tape::inference();
    let x = tape.input(Tensor::full(vec![1, 1, 1, 1, 1], 1.0));
    let l = tape.sum(&x).unwrap();
    assert!(tape.backward(&l, &mut store).is_err());
}

/// Mean over all voxels of `conv(x)` followed by average pooling; the loss is
/// translation invariant up to borders, and its all-ones directional derivative
/// on a constant input equals the sum of the input gradient.
fn smooth_loss(t: &mut Tape, x: &Var, w: &Tensor) -> Result<Var> {
    let wv = t.constant(w.clone());
    let y = t.conv3d(x, &wv, None, &ConvParams::same(1, 1, [3, 3, 3]))?;
    let y = t.avgpool3d(&y, &Pool3d::new([1, 2, 2], [1, 2, 2]))?;
    let s = t.sigmoid(&y)?;
    t.sum(&s)
}

#[test]
fn gradient_mass_equals_directional_derivative_on_constant_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let w = random(&mut rng, &[1, 1, 3, 3, 3], -0.3, 0.3);
    let shape = vec![1, 1, 4, 6, 6];
    let c = 0.7;
    let eval = |v: f64| {
        let mut tape = Tape::inference();
        let x = tape.input(Tensor::full(shape.clone(), v));
        smooth_loss(&mut tape, &x, &w).unwrap().value().data()[0]
    };
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(shape.clone(), c));
    let l = smooth_loss(&mut tape, &x, &w).unwrap();
    let g = tape.backward(&l, &mut store).unwrap().get(&x).unwrap().sum();
    let h = 1e-5;
    let fd = (eval(c + h) - eval(c - h)) / (2.0 * h);
    assert!((g - fd).abs() <= 1e-8 * fd.abs().max(g.abs()), "{g} vs {fd}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn concat_gradient_routes_slices_bitwise(seed in any::<u64>(), ca in 1usize..4, cb in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let a = tape.input(random(&mut rng, &[2, ca, 2, 2, 3], -1.0, 1.0));
        let b = tape.input(random(&mut rng, &[2, cb, 2, 2, 3], -1.0, 1.0));
        let cat = tape.concat(&[&a, &b]).unwrap();
        let r = random(&mut rng, cat.shape(), -1.0, 1.0);
        let l = project(&mut tape, &cat, &r).unwrap();
        let g = tape.backward(&l, &mut store).unwrap();
        prop_assert_eq!(g.get(&a).unwrap(), &r.slice_channels(0, ca).unwrap());
        prop_assert_eq!(g.get(&b).unwrap(), &r.slice_channels(ca, cb).unwrap());
    }

    #[test]
    fn maxpool_gradient_lands_on_argmax_only(seed in any::<u64>(), k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let xt = random(&mut rng, &[1, 2, 2, 6, 6], -1.0, 1.0);
        let pool = Pool3d::new([1, k, k], [1, k, k]);
        let (_, argmax) = s4nd_core::tensor::maxpool3d(&xt, &pool).unwrap();
        let x = tape.input(xt);
        let y = tape.maxpool3d(&x, &pool).unwrap();
        // Integer-valued upstream gradients keep the mass comparison exact.
        let r = Tensor::from_fn(y.shape().to_vec(), |_| rng.gen_range(-8i32..8) as f64);
        let l = project(&mut tape, &y, &r).unwrap();
        let g = tape.backward(&l, &mut store).unwrap().get(&x).unwrap().clone();
        prop_assert_eq!(g.sum(), r.sum());
        for (i, &v) in g.data().iter().enumerate() {
            if v != 0.0 {
                prop_assert!(argmax.contains(&i));
            }
        }
    }
}
