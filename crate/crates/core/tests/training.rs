use std::path::Path;

use s4nd_core::data::{generate_phantom_set, PhantomSpec, Scan};
use s4nd_core::froc::truth_cells;
use s4nd_core::train::{predict_scan, prepare, scan_geometry, PreparedScan, StopReason, Trainer};
use s4nd_core::{Config, Tensor};

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn argmax(grid: &Tensor<f64>) -> [usize; 3] {
    let shape = grid.shape();
    let (i, _) = grid
        .data()
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
    // Grid layout is (z, y, x); cells are reported as [x, y, z].
    [i % shape[2], (i / shape[2]) % shape[1], i / (shape[1] * shape[2])]
}

/// Overfits four single-nodule phantoms, then checks that each scan's most
/// confident cell holds its nodule and that an empty volume stays quiet.
#[test]
fn overfitted_detector_finds_each_nodule_and_ignores_air() {
    let cfg = Config::load(&configs().join("desk_overfit.conf")).unwrap();
    let spec = PhantomSpec {
        nodule_count: [1, 1],
        seed: 21,
        ..PhantomSpec::load(&configs().join("phantom_desk.conf")).unwrap()
    };
    let scans = generate_phantom_set(&spec, 4).unwrap();
    let prepared = prepare(&scans, &cfg).unwrap();
    let mut trainer = Trainer::<f64>::new(&cfg).unwrap();
    let stop = trainer.fit(&prepared, &prepared, |_, _, _| Ok(())).unwrap();
    assert_eq!(stop, StopReason::TargetLoss, "losses end at {:?}", trainer.step_losses.last());

    for scan in &prepared {
        let grid = predict_scan(&mut trainer.net, scan, &cfg).unwrap();
        let geom = scan_geometry(&cfg, scan.depth()).unwrap();
        let truth = truth_cells(&scan.id, &scan.nodules, &geom).unwrap();
        assert_eq!(truth.len(), 1);
        assert_eq!(argmax(&grid), truth[0].cell, "scan {}", scan.id);
    }

    let air = Scan {
        id: "air".into(),
        volume: Tensor::full(scans[0].volume.shape().to_vec(), -1000.0),
        meta: scans[0].meta.clone(),
        nodules: Vec::new(),
    };
    let grid = predict_scan(&mut trainer.net, &PreparedScan::new(&air, &cfg).unwrap(), &cfg).unwrap();
    let peak = grid.data().iter().copied().fold(0.0, f64::max);
    assert!(peak < 0.5, "air peaks at {peak}");
}
