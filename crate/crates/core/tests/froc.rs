use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s4nd_core::froc::{
    cpm, evaluate, extract_candidates, froc, match_candidates, Candidate, FrocCurve, Outcome, TruthCell, CPM_RATES,
};
use s4nd_core::Tensor;

mod support;
use support::{froc_oracle as oracle, interpolate, random_froc_instance as random_instance, truth};

#[test]
fn extraction_counts_cells_at_or_above_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let grid = Tensor::from_fn(vec![8, 8, 8], |_| if rng.gen_bool(0.5) { rng.gen::<f64>() } else { 1e-6 });
    let want = grid.data().iter().filter(|&&p| p >= 1e-4).count();
    assert_eq!(extract_candidates(&grid, "a", 1e-4).len(), want);
    let mut one = Tensor::full(vec![2, 2, 2], 1e-5);
    one.set(&[1, 0, 1], 0.9);
    let c = extract_candidates(&one, "a", 1e-4);
    assert_eq!(c, vec![Candidate::new("a", [1, 0, 1], 0.9)]);
}

#[test]
fn matching_rules() {
    let gt = [truth("a", 0, [1, 1, 1])];
    let m = match_candidates(&[Candidate::new("a", [1, 1, 1], 0.8)], &gt, false).unwrap();
    assert_eq!((m.true_positives(), m.false_positives()), (1, 0));

    let two = [Candidate::new("a", [1, 1, 1], 0.4), Candidate::new("a", [1, 1, 1], 0.9)];
    assert!(match_candidates(&two, &gt, false).is_err());
    let m = match_candidates(&two, &gt, true).unwrap();
    assert_eq!(m.candidates[0].outcome, Outcome::Ignored);
    assert_eq!(m.candidates[1].outcome, Outcome::TruePositive(vec![0]));
    assert_eq!(m.false_positives(), 0);

    let three = [
        Candidate::new("a", [1, 1, 1], 0.5),
        Candidate::new("a", [0, 1, 1], 0.6),
        Candidate::new("b", [1, 1, 1], 0.7),
    ];
    let m = match_candidates(&three, &gt, false).unwrap();
    assert_eq!((m.true_positives(), m.false_positives()), (1, 2));
}

#[test]
fn one_hit_credits_every_nodule_in_the_cell() {
    let gt = [truth("a", 0, [2, 2, 0]), truth("a", 1, [2, 2, 0])];
    let m = match_candidates(&[Candidate::new("a", [2, 2, 0], 0.7)], &gt, false).unwrap();
    assert_eq!(m.true_positives(), 2);
}

#[test]
fn perfect_and_empty_detectors() {
    let gt = [truth("a", 0, [0, 0, 0]), truth("b", 1, [3, 1, 2])];
    let perfect = [Candidate::new("a", [0, 0, 0], 1.0), Candidate::new("b", [3, 1, 2], 1.0)];
    let (curve, report) = evaluate(&perfect, &gt, 2).unwrap();
    assert_eq!(curve.points, vec![(0.0, 1.0), (0.0, 1.0)]);
    assert_eq!(report.sensitivities, [1.0; 7]);
    assert_eq!(report.cpm, 1.0);
    let (_, report) = evaluate(&[], &gt, 2).unwrap();
    assert_eq!(report.cpm, 0.0);
    assert!(evaluate(&[], &[], 2).is_err());
}

#[test]
fn hand_built_instance_equals_threshold_enumeration() {
    let gt = [truth("a", 0, [1, 1, 0]), truth("a", 1, [2, 0, 1]), truth("b", 2, [0, 3, 2])];
    let cands = [
        Candidate::new("a", [1, 1, 0], 0.9),
        Candidate::new("a", [3, 3, 3], 0.8),
        Candidate::new("b", [0, 3, 2], 0.7),
        Candidate::new("b", [1, 1, 1], 0.6),
        Candidate::new("a", [2, 0, 1], 0.3),
    ];
    let (curve, _) = evaluate(&cands, &gt, 2).unwrap();
    assert_eq!(curve.points, oracle(&cands, &gt, 2));
    let third = 1.0 / 3.0;
    assert_eq!(
        curve.points,
        vec![(0.0, third), (0.0, third), (0.5, third), (0.5, 2.0 * third), (1.0, 2.0 * third), (1.0, 1.0)]
    );
}

#[test]
fn linear_interpolation_of_the_step_curve() {
    let curve = FrocCurve {
        points: vec![(0.0, 0.5), (1.0, 0.5), (2.0, 1.0)],
        scan_count: 1,
        nodule_count: 2,
    };
    let r = cpm(&curve);
    assert_eq!(r.sensitivities, [0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0]);
    assert!((r.cpm - 5.0 / 7.0).abs() < 1e-15);
    assert_eq!(curve.sensitivity_at(1.5), 0.75);
    assert_eq!(CPM_RATES, [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curve_matches_oracle_and_is_monotone(seed in any::<u64>(), scans in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cands, gt) = random_instance(&mut rng, scans);
        let m = match_candidates(&cands, &gt, false).unwrap();
        let curve = froc(&m, scans).unwrap();
        let want = oracle(&cands, &gt, scans);
        prop_assert_eq!(&curve.points, &want);
        let report = cpm(&curve);
        for (k, &r) in CPM_RATES.iter().enumerate() {
            prop_assert!((report.sensitivities[k] - interpolate(&want, r)).abs() < 1e-12);
        }
        for w in curve.points.windows(2) {
            prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn increasing_transform_keeps_curve_and_score(seed in any::<u64>(), scans in 1usize..5, k in 0.2f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cands, gt) = random_instance(&mut rng, scans);
        let warped: Vec<Candidate> = cands
            .iter()
            .map(|c| Candidate { confidence: c.confidence.powf(k).ln() - 7.0, ..c.clone() })
            .collect();
        let (a, ra) = evaluate(&cands, &gt, scans).unwrap();
        let (b, rb) = evaluate(&warped, &gt, scans).unwrap();
        prop_assert_eq!(a.points, b.points);
        prop_assert_eq!(ra.cpm, rb.cpm);
    }

    #[test]
    fn score_lies_between_rate_extremes(seed in any::<u64>(), scans in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cands, gt) = random_instance(&mut rng, scans);
        let (_, r) = evaluate(&cands, &gt, scans).unwrap();
        let lo = r.sensitivities.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.sensitivities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-15 <= r.cpm && r.cpm <= hi + 1e-15);
        prop_assert!((0.0..=1.0).contains(&r.cpm));
    }

    #[test]
    fn pooled_scan_sets_match_joint_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ca, ga) = random_instance(&mut rng, 2);
        let (cb, gb) = random_instance(&mut rng, 3);
        let rename = |s: &str| format!("second-{s}");
        let cb: Vec<Candidate> = cb.into_iter().map(|c| Candidate { scan_id: rename(&c.scan_id), ..c }).collect();
        let gb: Vec<TruthCell> = gb.into_iter().map(|t| TruthCell { scan_id: rename(&t.scan_id), ..t }).collect();
        let cands = [ca, cb].concat();
        let gt = [ga, gb].concat();
        let (curve, _) = evaluate(&cands, &gt, 5).unwrap();
        prop_assert_eq!(curve.points, oracle(&cands, &gt, 5));
    }
}
