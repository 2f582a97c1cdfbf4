use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use s4nd_core::data::{annotations_to_voxels, Dataset};
use s4nd_core::froc::{truth_cells, write_candidates, Candidate};
use s4nd_core::train::scan_geometry;
use s4nd_core::Config;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config(name: &str) -> PathBuf {
    workspace().join("configs").join(name)
}

fn s4nd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s4nd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantoms(dir: &Path, count: usize, seed: u64) -> Output {
    s4nd(&[
        "phantom",
        "--spec",
        path(&config("phantom_desk.conf")),
        "--out",
        path(dir),
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
    ])
}

/// Writes a spec file derived from the desk phantom spec with `overrides` appended.
fn spec_with(dir: &Path, overrides: &str) -> PathBuf {
    let text = fs::read_to_string(config("phantom_desk.conf")).unwrap();
    let p = dir.join("spec.conf");
    fs::write(&p, format!("{text}\n{overrides}\n")).unwrap();
    p
}

fn config_with(dir: &Path, base: &str, overrides: &str) -> PathBuf {
    let text = fs::read_to_string(config(base)).unwrap();
    let p = dir.join(format!("{}.conf", overrides.len()));
    fs::write(&p, format!("{text}\n{overrides}\n")).unwrap();
    p
}

/// One full-confidence candidate on every annotated cell.
fn perfect_candidates(data: &Path, cfg: &Config) -> Vec<Candidate> {
    let ds = Dataset::open(data).unwrap();
    let mut out = Vec::new();
    for id in &ds.ids {
        let scan = ds.load(id).unwrap();
        let own: Vec<_> = ds.annotations(id).iter().collect();
        let geom = scan_geometry(cfg, scan.meta.dims[2]).unwrap();
        let mut cells: Vec<[usize; 3]> = truth_cells(id, &annotations_to_voxels(&own, &scan.meta), &geom)
            .unwrap()
            .into_iter()
            .map(|t| t.cell)
            .collect();
        cells.sort_unstable();
        cells.dedup();
        out.extend(cells.into_iter().map(|c| Candidate::new(id.clone(), c, 1.0)));
    }
    out
}

fn cpm_from(dir: &Path) -> f64 {
    let text = fs::read_to_string(dir.join("froc.csv")).unwrap();
    let last = text.lines().last().unwrap();
    last.strip_prefix("cpm,").unwrap().parse().unwrap()
}

#[test]
fn phantom_sets_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = phantoms(&tmp.path().join("a"), 5, 3);
    let b = phantoms(&tmp.path().join("b"), 5, 3);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let line = String::from_utf8(a.stdout).unwrap();
    assert!(line.starts_with("5 scans"), "{line}");
    let ds = Dataset::open(&tmp.path().join("a")).unwrap();
    assert_eq!(ds.ids.len(), 5);
    assert!(!tmp.path().join("a.partial").exists());
}

#[test]
fn oversized_nodules_are_rejected_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = spec_with(tmp.path(), "nodule_diameter_mm = 3.0 40.0");
    let out_dir = tmp.path().join("out");
    let out = s4nd(&["phantom", "--spec", path(&spec), "--out", path(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("validation"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn eval_scores_perfect_and_empty_candidate_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&phantoms(&data, 4, 11)), 0);
    let cfg_path = config("desk_overfit.conf");
    let cfg = Config::load(&cfg_path).unwrap();
    let perfect = tmp.path().join("perfect.csv");
    write_candidates(&perfect, &perfect_candidates(&data, &cfg)).unwrap();
    let empty = tmp.path().join("empty.csv");
    write_candidates(&empty, &[]).unwrap();
    for (file, want) in [(&perfect, 1.0), (&empty, 0.0)] {
        let out_dir = tmp.path().join(format!("eval{want}"));
        let out = s4nd(&[
            "eval",
            "--candidates",
            path(file),
            "--data",
            path(&data),
            "--config",
            path(&cfg_path),
            "--out",
            path(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains("CPM"));
        assert_eq!(cpm_from(&out_dir), want);
    }
}

#[test]
fn malformed_candidate_row_names_its_line() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&phantoms(&data, 2, 12)), 0);
    let file = tmp.path().join("bad.csv");
    fs::write(
        &file,
        "seriesuid,cellX,cellY,cellZ,probability\nphantom_0000,1,2,3,0.5\nphantom_0000,1,two,3,0.5\n",
    )
    .unwrap();
    let out = s4nd(&[
        "eval",
        "--candidates",
        path(&file),
        "--data",
        path(&data),
        "--config",
        path(&config("desk.conf")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_with_one() {
    let out = s4nd(&[
        "train",
        "--config",
        path(&config("desk.conf")),
        "--data",
        "/nonexistent/s4nd-data",
        "--out",
        "/tmp/unused",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("does not exist"));
    assert_eq!(code(&s4nd(&["train"])), 1);
    assert_eq!(code(&s4nd(&["no-such-command"])), 1);
    assert_eq!(code(&s4nd(&["--help"])), 0);
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&phantoms(&data, 1, 13)), 0);
    let ckpt = tmp.path().join("bad.ckpt");
    fs::write(&ckpt, b"NOTACKPT\x01\x00\x00\x00\x00").unwrap();
    let out = s4nd(&[
        "predict",
        "--config",
        path(&config("desk.conf")),
        "--checkpoint",
        path(&ckpt),
        "--data",
        path(&data),
        "--out",
        path(&tmp.path().join("pred")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("format error"), "{}", stderr(&out));
}

#[test]
fn corrupted_conv_backward_fails_the_gradient_check() {
    let out = s4nd(&["gradcheck", "--samples", "4", "--corrupt-conv", "1.01"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.lines().any(|l| l.starts_with("conv3d ") && l.ends_with("FAIL")), "{table}");
    assert!(table.lines().any(|l| l.starts_with("relu") && l.ends_with("pass")), "{table}");
}

/// Trains for two epochs in one go and for one epoch plus a resumed epoch.
#[test]
fn resumed_training_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&phantoms(&data, 4, 14)), 0);
    let two = config_with(tmp.path(), "desk.conf", "epochs = 2\neval_every = 0");
    let one = config_with(tmp.path(), "desk.conf", "epochs = 1\neval_every = 0\n");
    let train = |cfg: &Path, out: &Path, resume: Option<&Path>| {
        let mut args = vec!["train", "--config", path(cfg), "--data", path(&data), "--out", path(out), "--seed", "5"];
        if let Some(r) = resume {
            args.extend(["--resume", path(r)]);
        }
        let o = s4nd(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    train(&two, &full, None);
    train(&one, &part, None);
    let resumed = tmp.path().join("resumed");
    train(&two, &resumed, Some(&part.join("last.ckpt")));
    assert_eq!(fs::read(full.join("last.ckpt")).unwrap(), fs::read(resumed.join("last.ckpt")).unwrap());
    let manifest = fs::read_to_string(full.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"stop_reason\": \"Epochs\""));
    assert!(!full.join("manifest.json.partial").exists());
}

#[test]
fn deep_scan_is_tiled_into_one_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = spec_with(tmp.path(), "dims = 64 64 16");
    let data = tmp.path().join("data");
    let gen = s4nd(&["phantom", "--spec", path(&spec), "--out", path(&data), "--count", "1"]);
    assert_eq!(code(&gen), 0, "{}", stderr(&gen));
    let train_dir = tmp.path().join("run");
    let cfg = config_with(tmp.path(), "desk.conf", "epochs = 1\neval_every = 0");
    let out = s4nd(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&train_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let pred = tmp.path().join("pred");
    let out = s4nd(&[
        "predict",
        "--config",
        path(&cfg),
        "--checkpoint",
        path(&train_dir.join("last.ckpt")),
        "--scan",
        path(&data.join("scans/phantom_0000.mhd")),
        "--out",
        path(&pred),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (grid, meta) = s4nd_core::data::read_metaimage(&pred.join("phantom_0000.grid.mhd")).unwrap();
    assert_eq!(meta.dims, [8, 8, 16]);
    assert!(grid.data().iter().all(|&p| p > 0.0 && p < 1.0));
    assert!(pred.join("candidates.csv").exists());
    let leftovers: Vec<_> = fs::read_dir(&pred)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains("partial"))
        .collect();
    assert!(leftovers.is_empty());
}
