//! End-to-end training, scan-level prediction and evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::architecture::Network;
use crate::autograd::{checkpoint, Sgd, SgdConfig, StepDecay, Tape};
use crate::config::Config;
use crate::data::{self, normalize_hu, Chunk, Scan};
use crate::error::{Error, Result};
use crate::froc::{self, Candidate, CpmReport, TruthCell};
use crate::loss::{bce_on_tape, encode_labels, shift_augment, BceWeights, GridGeometry, ShiftDirection};
use crate::rng::{self, Stream};
use crate::tensor::{BatchNormMode, Real, Tensor};

/// A scan normalized to `[0, 1]` and checked against the network's in-plane extent.
#[derive(Clone, Debug)]
pub struct PreparedScan {
    pub id: String,
    pub volume: Tensor<f64>,
    pub nodules: Vec<crate::loss::VoxelNodule>,
    tiles: Vec<Chunk>,
}

impl PreparedScan {
    pub fn new(scan: &Scan, config: &Config) -> Result<Self> {
        let [x, y, _] = config.network.input_shape;
        let &[_, h, w] = scan.volume.shape() else {
            return Err(Error::dim("scan rank", 3, scan.volume.rank()));
        };
        if (w, h) != (x, y) {
            return Err(Error::Validation(format!(
                "scan {} is {w} x {h} in-plane but the network expects {x} x {y}",
                scan.id
            )));
        }
        let volume = normalize_hu(&scan.volume, config.data.hu_window)?;
        let tiles = data::tile_z(&volume, &scan.nodules, config.data.chunk_depth, config.data.chunk_stride)?;
        Ok(PreparedScan {
            id: scan.id.clone(),
            volume,
            nodules: scan.nodules.clone(),
            tiles,
        })
    }

    pub fn depth(&self) -> usize {
        self.volume.shape()[0]
    }
}

pub fn prepare(scans: &[Scan], config: &Config) -> Result<Vec<PreparedScan>> {
    scans.iter().map(|s| PreparedScan::new(s, config)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub learning_rate: f64,
    /// Training-set CPM when it was evaluated this epoch.
    pub cpm: Option<f64>,
}

/// Why a call to [`Trainer::fit`] returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Epochs,
    Iterations,
    TargetLoss,
}

/// A batch whose loss or gradients were not finite.
#[derive(Clone, Debug)]
pub struct FailedBatch {
    pub step: usize,
    pub scan_ids: Vec<String>,
    pub z_offsets: Vec<usize>,
    pub loss: f64,
}

/// Network, optimizer and counters of one training run.
pub struct Trainer<T: Real = f64> {
    pub config: Config,
    pub net: Network<T>,
    sgd: Sgd<T>,
    schedule: StepDecay,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_cpm: Option<f64>,
    pub failed: Option<FailedBatch>,
}

const META_EPOCH: &str = "meta/epoch";
const META_STEP: &str = "meta/step";
const META_BEST: &str = "meta/best_cpm";
const VELOCITY: &str = "velocity/";

fn scalar_record(name: &str, v: f64) -> (String, Tensor<f64>) {
    (name.to_string(), Tensor::new(vec![1], vec![v]).expect("scalar record"))
}

impl<T: Real> Trainer<T> {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let t = &config.train;
        Ok(Trainer {
            net: Network::build(&config.network, t.seed)?,
            sgd: Sgd::new(SgdConfig {
                momentum: t.momentum,
                weight_decay: t.weight_decay,
            })?,
            schedule: StepDecay {
                base: t.learning_rate,
                factor: t.lr_decay_factor,
                milestones: t.lr_decay_epochs.clone(),
            },
            config: config.clone(),
            epoch: 0,
            step: 0,
            step_losses: Vec::new(),
            best_cpm: None,
            failed: None,
        })
    }

    /// Parameters, running statistics, optimizer velocities and counters.
    pub fn checkpoint_records(&self) -> Vec<(String, Tensor<f64>)> {
        let mut recs = self.net.store().records();
        recs.extend(
            self.sgd
                .records(self.net.store())
                .into_iter()
                .map(|(n, t)| (format!("{VELOCITY}{n}"), t)),
        );
        recs.push(scalar_record(META_EPOCH, self.epoch as f64));
        recs.push(scalar_record(META_STEP, self.step as f64));
        recs.push(scalar_record(META_BEST, self.best_cpm.unwrap_or(f64::NAN)));
        recs
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_records())
    }

    /// Restores a run saved by [`Trainer::save`]. Continuing it reproduces the
    /// uninterrupted run exactly, since every random draw is derived from the
    /// seed and the epoch or step number.
    pub fn resume(config: &Config, path: &Path) -> Result<Self> {
        let mut trainer = Self::new(config)?;
        trainer.load_records(checkpoint::load(path)?)?;
        Ok(trainer)
    }

    fn load_records(&mut self, records: Vec<(String, Tensor<f64>)>) -> Result<()> {
        let (mut params, mut velocity) = (Vec::new(), Vec::new());
        for (name, t) in records {
            match name.as_str() {
                META_EPOCH => self.epoch = t.data()[0] as usize,
                META_STEP => self.step = t.data()[0] as usize,
                META_BEST => self.best_cpm = Some(t.data()[0]).filter(|v| !v.is_nan()),
                _ => match name.strip_prefix(VELOCITY) {
                    Some(n) => velocity.push((n.to_string(), t)),
                    None => params.push((name, t)),
                },
            }
        }
        load_network_records(&mut self.net, &params)?;
        self.sgd.load_records(self.net.store(), &velocity)
    }

    /// Learning rate in effect during the current epoch.
    pub fn learning_rate(&self) -> f64 {
        self.schedule.rate(self.epoch)
    }

    /// Draws the training chunk for slot `tile` of `scan`. Scans deeper than a
    /// chunk are cropped at a random depth around a random nodule; the chunk is
    /// then shifted in-plane with the configured probability.
    fn sample_chunk(&self, scan: &PreparedScan, tile: usize, rng: &mut impl Rng) -> Result<Chunk> {
        let cfg = &self.config;
        let chunk = if scan.depth() > cfg.data.chunk_depth {
            data::random_z_crop(&scan.volume, &scan.nodules, cfg.data.chunk_depth, rng)?
        } else {
            scan.tiles[tile].clone()
        };
        let t = &cfg.train;
        if t.shift_amount > 0 && rng.gen_bool(t.shift_probability) {
            let dir = *ShiftDirection::ALL.choose(rng).expect("four directions");
            let (volume, nodules) = shift_augment(&chunk.volume, &chunk.nodules, dir, t.shift_amount)?;
            return Ok(Chunk {
                volume,
                nodules,
                z_offset: chunk.z_offset,
            });
        }
        Ok(chunk)
    }

    /// One optimizer step on a batch of chunks; returns the batch loss.
    fn train_step(&mut self, chunks: &[Chunk], ids: &[&str], lr: f64) -> Result<f64> {
        let [d, h, w] = self.net.geometry().input;
        let geom = grid_geometry(&self.config)?;
        let n = chunks.len();
        let mut x = Vec::with_capacity(n * d * h * w);
        let mut y = Vec::with_capacity(n * geom.cell_count());
        for c in chunks {
            x.extend(c.volume.data().iter().map(|&v| T::of(v)));
            let (labels, _) = encode_labels(&c.nodules, &geom);
            y.extend(labels.grid.data().iter().copied());
        }
        let [s0, s1, t] = geom.grid;
        let weights = BceWeights::for_batch(&self.config.loss, &y);
        let labels = Tensor::new(vec![n, 1, t, s1, s0], y.into_iter().map(T::of).collect())?;
        let input = Tensor::new(vec![n, 1, d, h, w], x)?;

        let mut tape = Tape::new();
        let xv = tape.constant(input);
        let pred = self.net.forward(&mut tape, &xv, BatchNormMode::Train)?;
        let loss = bce_on_tape(&mut tape, &pred, &labels, &weights)?;
        let value = loss.value().data()[0].as_f64();
        tape.backward(&loss, self.net.store_mut())?;
        if !value.is_finite() || !self.net.store().grads_finite() {
            self.failed = Some(FailedBatch {
                step: self.step,
                scan_ids: ids.iter().map(|s| s.to_string()).collect(),
                z_offsets: chunks.iter().map(|c| c.z_offset).collect(),
                loss: value,
            });
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at step {} (loss {value}) on scans {ids:?}",
                self.step
            )));
        }
        self.sgd.step(self.net.store_mut(), lr)?;
        Ok(value)
    }

    /// Runs one epoch over every training chunk in a seeded order. Stops
    /// early, returning `None`, when the iteration cap is reached first.
    pub fn train_epoch(&mut self, scans: &[PreparedScan]) -> Result<Option<EpochMetrics>> {
        let mut slots: Vec<(usize, usize)> = scans
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.tiles.len()).map(move |k| (i, k)))
            .collect();
        if slots.is_empty() {
            return Err(Error::Validation("no training chunks".into()));
        }
        slots.shuffle(&mut rng::substream(self.config.train.seed, Stream::Shuffle, self.epoch as u64));
        let lr = self.learning_rate();
        let batch = self.config.train.batch_size;
        let (mut total, mut batches) = (0.0, 0usize);
        for group in slots.chunks(batch) {
            if self.config.train.max_iterations.is_some_and(|m| self.step >= m) {
                return Ok(None);
            }
            let mut rng = rng::substream(self.config.train.seed, Stream::Augment, self.step as u64);
            let chunks = group
                .iter()
                .map(|&(i, k)| self.sample_chunk(&scans[i], k, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let ids: Vec<&str> = group.iter().map(|&(i, _)| scans[i].id.as_str()).collect();
            let loss = self.train_step(&chunks, &ids, lr)?;
            self.step_losses.push(loss);
            self.step += 1;
            total += loss;
            batches += 1;
        }
        self.epoch += 1;
        Ok(Some(EpochMetrics {
            epoch: self.epoch,
            loss: total / batches as f64,
            learning_rate: lr,
            cpm: None,
        }))
    }

    /// Trains until the epoch budget, iteration cap or target is reached. The
    /// target is a loss below `target_loss` and, when `target_cpm` is set, an
    /// evaluation CPM of at least that value in the same epoch; the CPM is then
    /// computed on every epoch whose loss is below target.
    /// `eval` scans are scored every `eval_every` epochs and at the end;
    /// `on_epoch` sees each epoch's metrics and whether the CPM improved.
    pub fn fit(
        &mut self,
        scans: &[PreparedScan],
        eval: &[PreparedScan],
        mut on_epoch: impl FnMut(&mut Self, &EpochMetrics, bool) -> Result<()>,
    ) -> Result<StopReason> {
        let every = self.config.train.eval_every;
        loop {
            if self.epoch >= self.config.train.epochs {
                return Ok(StopReason::Epochs);
            }
            let Some(mut m) = self.train_epoch(scans)? else {
                return Ok(StopReason::Iterations);
            };
            let loss_reached = self.config.train.target_loss.is_some_and(|t| m.loss < t);
            let wants_cpm = self.config.train.target_cpm.is_some();
            let last = (loss_reached && !wants_cpm)
                || self.epoch >= self.config.train.epochs
                || self.config.train.max_iterations.is_some_and(|c| self.step >= c);
            let mut improved = false;
            if !eval.is_empty() && ((every > 0 && self.epoch % every == 0) || last || (loss_reached && wants_cpm)) {
                let (report, _) = evaluate(&mut self.net, eval, &self.config)?;
                improved = self.best_cpm.map_or(true, |b| report.cpm > b);
                if improved {
                    self.best_cpm = Some(report.cpm);
                }
                m.cpm = Some(report.cpm);
            }
            let reached = loss_reached
                && match self.config.train.target_cpm {
                    Some(target) => m.cpm.is_some_and(|c| c >= target),
                    None => true,
                };
            on_epoch(self, &m, improved)?;
            if reached {
                return Ok(StopReason::TargetLoss);
            }
            if self.config.train.max_iterations.is_some_and(|c| self.step >= c) {
                return Ok(StopReason::Iterations);
            }
        }
    }
}

/// Loads parameter and running-statistic records, reporting any disagreement
/// with the configured architecture as an incompatibility.
pub fn load_network_records<T: Real>(net: &mut Network<T>, records: &[(String, Tensor<f64>)]) -> Result<()> {
    net.store_mut()
        .load_records(records)
        .map_err(|e| Error::Validation(format!("checkpoint is incompatible with the configured network: {e}")))
}

/// Restores network weights from a checkpoint written by a trainer.
pub fn load_network<T: Real>(config: &Config, path: &Path) -> Result<Network<T>> {
    let mut net = Network::build(&config.network, config.train.seed)?;
    let records: Vec<_> = checkpoint::load(path)?
        .into_iter()
        .filter(|(n, _)| !n.starts_with(VELOCITY) && !n.starts_with("meta/"))
        .collect();
    load_network_records(&mut net, &records)?;
    Ok(net)
}

/// Cell partition of one chunk.
pub fn grid_geometry(config: &Config) -> Result<GridGeometry> {
    GridGeometry::new(config.network.input_shape, config.network.grid_shape)
}

/// Probability grid `(T', S, S)` of a whole normalized scan: the scan is tiled
/// in depth, each chunk is scored independently with batch norm in inference
/// mode, and overlapping cells keep their maximum.
pub fn predict_scan<T: Real>(net: &mut Network<T>, scan: &PreparedScan, config: &Config) -> Result<Tensor<f64>> {
    let cell_z = grid_geometry(config)?.cell[2];
    let mut grids = Vec::with_capacity(scan.tiles.len());
    for chunk in &scan.tiles {
        let mut shape = vec![1, 1];
        shape.extend_from_slice(chunk.volume.shape());
        let x = Tensor::new(shape, chunk.volume.data().iter().map(|&v| T::of(v)).collect())?;
        let y = net.predict(&x, BatchNormMode::Infer)?.cast::<f64>();
        let dims = y.dims5()?;
        grids.push((y.reshape(vec![dims[2], dims[3], dims[4]])?, chunk.z_offset));
    }
    data::merge_chunk_grids(&grids, cell_z)
}

/// Geometry of the scan-level grid that [`predict_scan`] produces for a scan
/// of `depth` slices: the chunks' cells stacked up to the end of the last,
/// possibly zero-padded, chunk.
pub fn scan_geometry(config: &Config, depth: usize) -> Result<GridGeometry> {
    let chunk = grid_geometry(config)?;
    let (size, stride) = (config.data.chunk_depth, config.data.chunk_stride);
    let mut last = 0;
    while last + size < depth {
        last += stride;
    }
    let [s0, s1, _] = chunk.grid;
    let t = (last + size) / chunk.cell[2];
    GridGeometry::new([s0 * chunk.cell[0], s1 * chunk.cell[1], t * chunk.cell[2]], [s0, s1, t])
}

/// Candidates and FROC score of the network on a set of scans.
pub fn evaluate<T: Real>(
    net: &mut Network<T>,
    scans: &[PreparedScan],
    config: &Config,
) -> Result<(CpmReport, Vec<Candidate>)> {
    let mut candidates = Vec::new();
    let mut truth: Vec<TruthCell> = Vec::new();
    for scan in scans {
        let grid = predict_scan(net, scan, config)?;
        let geom = scan_geometry(config, scan.depth())?;
        debug_assert_eq!(geom.grid[2], grid.shape()[0]);
        candidates.extend(froc::extract_candidates(&grid, &scan.id, config.data.candidate_floor));
        truth.extend(froc::truth_cells(&scan.id, &scan.nodules, &geom)?);
    }
    if truth.is_empty() {
        return Err(Error::Validation("evaluation scans contain no nodules".into()));
    }
    let (_, report) = froc::evaluate(&candidates, &truth, scans.len())?;
    Ok((report, candidates))
}
