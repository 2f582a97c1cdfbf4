//! Subcommands of the `s4nd` binary.

mod manifest;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use s4nd_core::config::DownsampleMode;
use s4nd_core::data::{self, generate_phantom_set, kfold_split, read_metaimage, Dataset, ElementType, PhantomSpec, VolumeMeta};
use s4nd_core::froc::{self, CpmReport, CPM_RATES};
use s4nd_core::gradsuite::{self, SuiteEntry};
use s4nd_core::train::{self, PreparedScan, StopReason, Trainer};
use s4nd_core::{Config, Network, NetworkConfig, Real, Tensor};

pub use manifest::{atomic_write, fingerprint, EpochRecord, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] s4nd_core::Error),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    /// 1 for usage errors, 3 for numeric failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::GradCheck(_) | CliError::Core(s4nd_core::Error::Numeric(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Parser)]
#[command(name = "s4nd", version, about = "Single-shot grid-cell nodule detection on 3D volumes")]
pub struct Cli {
    /// Worker threads for the numeric kernels.
    #[arg(long, global = true, env = "S4ND_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value = "f64")]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a detector on a dataset directory.
    Train(TrainArgs),
    /// Score scans with a trained checkpoint.
    Predict(PredictArgs),
    /// FROC analysis of a candidate file against annotations.
    Eval(EvalArgs),
    /// Compare downsampling modes over several seeds.
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset.
    Phantom(PhantomArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset scored for the best-CPM checkpoint; defaults to the training scans.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Split the dataset into this many folds and hold one out for evaluation.
    #[arg(long, requires = "fold")]
    pub folds: Option<usize>,
    /// Zero-based index of the held-out fold.
    #[arg(long, requires = "folds")]
    pub fold: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single `.mhd` scan.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub scan: Option<PathBuf>,
    /// A dataset directory; every scan in it is scored.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    /// Defaults to the dataset's own annotations.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Dataset whose scan headers define the evaluated scans and their geometry.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for `froc.csv`; the table is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// First seed; runs use `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Dataset scored after training; defaults to the training scans.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Network for the sampled check; the built-in desk network when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale convolution weight gradients by this factor (negative control).
    #[arg(long, hide = true)]
    pub corrupt_conv: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom spec file; built-in defaults when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Applies the thread setting and runs one subcommand.
pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        // A second initialization (e.g. in tests) keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let threads = rayon::current_num_threads();
    match cli.command {
        Command::Train(a) => match cli.precision {
            Precision::F64 => cmd_train::<f64>(&a, threads),
            Precision::F32 => cmd_train::<f32>(&a, threads),
        },
        Command::Predict(a) => match cli.precision {
            Precision::F64 => cmd_predict::<f64>(&a),
            Precision::F32 => cmd_predict::<f32>(&a),
        },
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Phantom(a) => cmd_phantom(&a),
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} directory {} does not exist", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} file {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| s4nd_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn load_config(path: &Path) -> CliResult<Config> {
    require_file(path, "config")?;
    let cfg = Config::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_scans(ds: &Dataset, ids: &[String], cfg: &Config) -> CliResult<Vec<PreparedScan>> {
    ids.iter()
        .map(|id| Ok(PreparedScan::new(&ds.load(id)?, cfg)?))
        .collect()
}

fn open_dataset(path: &Path) -> CliResult<Dataset> {
    require_dir(path, "data")?;
    Ok(Dataset::open(path)?)
}

fn cmd_train<T: Real>(a: &TrainArgs, threads: usize) -> CliResult<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let ds = open_dataset(&a.data)?;
    create_dir(&a.out)?;
    let (train_ids, mut eval_ids) = match (a.folds, a.fold) {
        (Some(k), Some(i)) => {
            let folds = kfold_split(&ds.ids, k, cfg.train.seed)?;
            if i >= k {
                return Err(CliError::Usage(format!("--fold {i} is not below --folds {k}")));
            }
            let train: Vec<String> = folds.iter().enumerate().filter(|(j, _)| *j != i).flat_map(|(_, f)| f.clone()).collect();
            (train, folds[i].clone())
        }
        _ => (ds.ids.clone(), Vec::new()),
    };
    let scans = load_scans(&ds, &train_ids, &cfg)?;
    let eval_scans = match &a.eval_data {
        Some(dir) => {
            let eds = open_dataset(dir)?;
            eval_ids = eds.ids.clone();
            load_scans(&eds, &eval_ids, &cfg)?
        }
        None if !eval_ids.is_empty() => load_scans(&ds, &eval_ids, &cfg)?,
        None => scans.clone(),
    };

    let mut trainer = match &a.resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Trainer::<T>::resume(&cfg, p)?
        }
        None => Trainer::<T>::new(&cfg)?,
    };
    let best = a.out.join("best.ckpt");
    let last = a.out.join("last.ckpt");
    let manifest_path = a.out.join("manifest.json");
    atomic_write(&a.out.join("config.conf"), cfg.to_text().as_bytes())?;
    let mut manifest = RunManifest {
        config: cfg.to_text(),
        seed: cfg.train.seed,
        precision: T::NAME.to_string(),
        threads,
        dataset_fingerprint: fingerprint(&a.data)?,
        train_scans: train_ids.clone(),
        eval_scans: eval_ids,
        parameters: trainer.net.count_parameters(),
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_checkpoint: None,
        last_checkpoint: None,
        best_cpm: trainer.best_cpm,
        stop_reason: None,
        total_seconds: 0.0,
    };
    log::info!(
        "training {} parameters on {} scans ({} for evaluation), seed {}, {} threads",
        manifest.parameters,
        scans.len(),
        eval_scans.len(),
        cfg.train.seed,
        threads
    );
    let start = Instant::now();
    let mut epoch_start = Instant::now();
    let mut recorded = trainer.step_losses.len();
    let outcome = trainer.fit(&scans, &eval_scans, |t, m, improved| {
        t.save(&last)?;
        if improved {
            t.save(&best)?;
            manifest.best_checkpoint = Some(best.display().to_string());
        }
        manifest.last_checkpoint = Some(last.display().to_string());
        manifest.best_cpm = t.best_cpm;
        manifest.step_losses.extend_from_slice(&t.step_losses[recorded..]);
        recorded = t.step_losses.len();
        manifest.epochs.push(EpochRecord {
            epoch: m.epoch,
            loss: m.loss,
            learning_rate: m.learning_rate,
            cpm: m.cpm,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        manifest.total_seconds = start.elapsed().as_secs_f64();
        manifest.save(&manifest_path)?;
        log::info!(
            "epoch {:>4}  step {:>6}  loss {:.5}  lr {:.2e}{}",
            m.epoch,
            t.step,
            m.loss,
            m.learning_rate,
            m.cpm.map(|c| format!("  cpm {c:.4}")).unwrap_or_default()
        );
        epoch_start = Instant::now();
        Ok(())
    });
    match outcome {
        Ok(reason) => {
            if trainer.step_losses.len() > recorded {
                // Steps after the last completed epoch (iteration cap hit mid-epoch).
                manifest.step_losses.extend_from_slice(&trainer.step_losses[recorded..]);
                trainer.save(&last)?;
                manifest.last_checkpoint = Some(last.display().to_string());
            }
            if manifest.best_checkpoint.is_none() {
                let (report, _) = train::evaluate(&mut trainer.net, &eval_scans, &cfg)?;
                trainer.best_cpm = Some(report.cpm);
                trainer.save(&best)?;
                manifest.best_checkpoint = Some(best.display().to_string());
                manifest.best_cpm = trainer.best_cpm;
            }
            manifest.stop_reason = Some(format!("{reason:?}"));
            manifest.total_seconds = start.elapsed().as_secs_f64();
            manifest.save(&manifest_path)?;
            log::info!(
                "stopped ({reason:?}) after {} steps; best CPM {:?}",
                trainer.step,
                trainer.best_cpm
            );
            Ok(())
        }
        Err(e) => {
            if let Some(f) = &trainer.failed {
                let dump = serde_json::json!({
                    "step": f.step,
                    "scans": f.scan_ids,
                    "z_offsets": f.z_offsets,
                    "loss": format!("{}", f.loss),
                    "error": e.to_string(),
                });
                let text = serde_json::to_string_pretty(&dump).expect("json");
                atomic_write(&a.out.join("failed_batch.json"), text.as_bytes())?;
            }
            manifest.stop_reason = Some(format!("error: {e}"));
            manifest.save(&manifest_path)?;
            Err(e.into())
        }
    }
}

/// Header of the probability grid written next to a scan's candidates: one
/// voxel per cell, centred on the cell it scores.
fn grid_meta(scan: &VolumeMeta, cfg: &Config, grid: &Tensor<f64>) -> CliResult<VolumeMeta> {
    let cell = train::grid_geometry(cfg)?.cell;
    let &[t, s1, s0] = grid.shape() else { unreachable!("grids are rank 3") };
    let spacing = [0, 1, 2].map(|a| scan.spacing[a] * cell[a] as f64);
    let origin = [0, 1, 2].map(|a| scan.origin[a] + scan.spacing[a] * (cell[a] as f64 - 1.0) / 2.0);
    Ok(VolumeMeta {
        dims: [s0, s1, t],
        spacing,
        origin,
        element_type: ElementType::Float,
    })
}

fn cmd_predict<T: Real>(a: &PredictArgs) -> CliResult<()> {
    let cfg = load_config(&a.config)?;
    require_file(&a.checkpoint, "checkpoint")?;
    let mut net: Network<T> = train::load_network(&cfg, &a.checkpoint)?;
    let scans: Vec<(String, PathBuf)> = match (&a.scan, &a.data) {
        (Some(p), _) => {
            require_file(p, "scan")?;
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("scan").to_string();
            vec![(id, p.clone())]
        }
        (None, Some(d)) => {
            let ds = open_dataset(d)?;
            ds.ids.iter().map(|id| (id.clone(), ds.header_path(id))).collect()
        }
        (None, None) => return Err(CliError::Usage("either --scan or --data is required".into())),
    };
    create_dir(&a.out)?;
    let mut candidates = Vec::new();
    for (id, path) in &scans {
        let (volume, meta) = read_metaimage(path)?;
        let scan = data::Scan {
            id: id.clone(),
            volume,
            meta: meta.clone(),
            nodules: Vec::new(),
        };
        let prepared = PreparedScan::new(&scan, &cfg)?;
        let grid = train::predict_scan(&mut net, &prepared, &cfg)?;
        let found = froc::extract_candidates(&grid, id, cfg.data.candidate_floor);
        let peak = grid.data().iter().copied().fold(0.0, f64::max);
        log::info!("{id}: {} candidates, max probability {peak:.4}", found.len());
        candidates.extend(found);
        let header = a.out.join(format!("{id}.grid.mhd"));
        let raw = header.with_extension("raw");
        let gmeta = grid_meta(&meta, &cfg, &grid)?;
        let tmp_dir = a.out.join(".partial");
        create_dir(&tmp_dir)?;
        data::write_metaimage(&tmp_dir.join(header.file_name().unwrap()), &grid, &gmeta)?;
        for p in [&raw, &header] {
            let from = tmp_dir.join(p.file_name().unwrap());
            fs::rename(&from, p).map_err(|e| s4nd_core::Error::Io { path: p.to_path_buf(), source: e })?;
        }
        let _ = fs::remove_dir(&tmp_dir);
    }
    let out = a.out.join("candidates.csv");
    let tmp = manifest::partial(&out);
    froc::write_candidates(&tmp, &candidates)?;
    fs::rename(&tmp, &out).map_err(|e| s4nd_core::Error::Io { path: out.clone(), source: e })?;
    Ok(())
}

/// Runs the FROC analysis described by `a`, prints the table and returns the report.
pub fn cmd_eval(a: &EvalArgs) -> CliResult<CpmReport> {
    let cfg = load_config(&a.config)?;
    let ds = open_dataset(&a.data)?;
    require_file(&a.candidates, "candidates")?;
    let candidates = froc::read_candidates(&a.candidates)?;
    let annotations = match &a.annotations {
        Some(p) => {
            require_file(p, "annotations")?;
            data::read_annotations(p)?
        }
        None => ds.all_annotations().cloned().collect(),
    };
    let mut truth = Vec::new();
    for id in &ds.ids {
        let (_, meta) = read_metaimage(&ds.header_path(id))?;
        let geom = train::scan_geometry(&cfg, meta.dims[2])?;
        let own: Vec<&data::Annotation> = annotations.iter().filter(|x| &x.scan_id == id).collect();
        truth.extend(froc::truth_cells(id, &data::annotations_to_voxels(&own, &meta), &geom)?);
    }
    if let Some(x) = annotations.iter().find(|x| ds.ids.binary_search(&x.scan_id).is_err()) {
        return Err(s4nd_core::Error::Validation(format!("annotation for unknown scan {}", x.scan_id)).into());
    }
    if let Some(c) = candidates.iter().find(|c| ds.ids.binary_search(&c.scan_id).is_err()) {
        return Err(s4nd_core::Error::Validation(format!("candidate for unknown scan {}", c.scan_id)).into());
    }
    let (_, report) = froc::evaluate(&candidates, &truth, ds.ids.len())?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        create_dir(out)?;
        atomic_write(&out.join("froc.csv"), report.csv().as_bytes())?;
    }
    Ok(report)
}

/// One arm of the downsampling comparison.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct AblationRow {
    pub mode: String,
    pub seed: u64,
    /// Sensitivity at the largest false-positive rate of the score.
    pub sensitivity: f64,
    pub cpm: f64,
    pub parameters: usize,
}

pub const ABLATION_HEADER: &str = "mode,seed,sensitivity,cpm,parameters";

/// Rows per run followed by one `mean` row per mode.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6},{}\n", r.mode, r.seed, r.sensitivity, r.cpm, r.parameters));
    }
    for &mode in DownsampleMode::ALL {
        let arm: Vec<&AblationRow> = rows.iter().filter(|r| r.mode == mode.as_str()).collect();
        if arm.is_empty() {
            continue;
        }
        let n = arm.len() as f64;
        s.push_str(&format!(
            "{},mean,{:.6},{:.6},{}\n",
            mode.as_str(),
            arm.iter().map(|r| r.sensitivity).sum::<f64>() / n,
            arm.iter().map(|r| r.cpm).sum::<f64>() / n,
            arm[0].parameters
        ));
    }
    s
}

fn cmd_ablate(a: &AblateArgs) -> CliResult<()> {
    let base = load_config(&a.config)?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let ds = open_dataset(&a.data)?;
    create_dir(&a.out)?;
    let scans = load_scans(&ds, &ds.ids, &base)?;
    let eval = match &a.eval_data {
        Some(d) => {
            let e = open_dataset(d)?;
            load_scans(&e, &e.ids, &base)?
        }
        None => scans.clone(),
    };
    let mut rows = Vec::new();
    for &mode in DownsampleMode::ALL {
        for k in 0..a.seeds as u64 {
            let mut cfg = base.clone();
            cfg.network.downsample_mode = mode;
            cfg.train.seed = a.seed + k;
            let start = Instant::now();
            let mut t = Trainer::<f64>::new(&cfg)?;
            // Training scans drive any loss or CPM stopping target.
            let reason: StopReason = t.fit(&scans, &scans, |_, _, _| Ok(()))?;
            let (report, _) = train::evaluate(&mut t.net, &eval, &cfg)?;
            let row = AblationRow {
                mode: mode.as_str().to_string(),
                seed: cfg.train.seed,
                sensitivity: report.sensitivities[CPM_RATES.len() - 1],
                cpm: report.cpm,
                parameters: t.net.count_parameters(),
            };
            log::info!(
                "{} seed {}: cpm {:.4} sensitivity {:.4} ({} steps, {reason:?}, {:.0}s)",
                row.mode,
                row.seed,
                row.cpm,
                row.sensitivity,
                t.step,
                start.elapsed().as_secs_f64()
            );
            rows.push(row);
        }
    }
    let csv = ablation_csv(&rows);
    atomic_write(&a.out.join("ablation.csv"), csv.as_bytes())?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{:<12} {:>6} {:>12} {:>8} {:>11}", "mode", "seed", "sensitivity", "cpm", "parameters");
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let _ = writeln!(stdout, "{:<12} {:>6} {:>12} {:>8} {:>11}", f[0], f[1], f[2], f[3], f[4]);
    }
    Ok(())
}

/// Runs the operation suite and the sampled network check.
pub fn gradcheck_entries(a: &GradcheckArgs) -> CliResult<Vec<SuiteEntry>> {
    let net_cfg = match &a.config {
        Some(p) => load_config(p)?.network,
        None => NetworkConfig::desk(),
    };
    let mut entries = gradsuite::op_suite(a.seed, a.corrupt_conv)?;
    entries.push(gradsuite::network_check(&net_cfg, a.samples, a.seed, a.corrupt_conv)?);
    Ok(entries)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let entries = gradcheck_entries(a)?;
    println!("{:<40} {:>12} {:>10}  status", "check", "max error", "threshold");
    for e in &entries {
        println!(
            "{:<40} {:>12.3e} {:>10.0e}  {}",
            e.report.op,
            e.report.max_error(),
            e.threshold,
            if e.passed() { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.report.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

fn cmd_phantom(a: &PhantomArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            require_file(p, "phantom spec")?;
            PhantomSpec::load(p)?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    if a.out.exists() && fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(true) {
        return Err(CliError::Usage(format!("output directory {} is not empty", a.out.display())));
    }
    let scans = generate_phantom_set(&spec, a.count)?;
    let tmp = manifest::partial(&a.out);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| s4nd_core::Error::Io { path: tmp.clone(), source: e })?;
    }
    Dataset::write(&tmp, &scans)?;
    if a.out.exists() {
        fs::remove_dir(&a.out).map_err(|e| s4nd_core::Error::Io { path: a.out.clone(), source: e })?;
    }
    fs::rename(&tmp, &a.out).map_err(|e| s4nd_core::Error::Io { path: a.out.clone(), source: e })?;
    let nodules: usize = scans.iter().map(|s| s.nodules.len()).sum();
    println!(
        "{} scans, {nodules} nodules, fingerprint {}",
        scans.len(),
        fingerprint(&a.out)?
    );
    Ok(())
}
