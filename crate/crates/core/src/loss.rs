//! Grid labels, the class-weighted cross-entropy loss and shift augmentation.

use crate::autograd::{Tape, Var};
use crate::config::{LossConfig, LossReduction, LossTerms, PosWeight};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before taking logarithms.
pub const CLAMP: f64 = 1e-7;

/// A nodule in chunk-local voxel coordinates `(x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelNodule {
    /// Identifier that stays stable across tiling and augmentation.
    pub id: usize,
    pub center: [f64; 3],
    pub diameter_mm: f64,
}

impl VoxelNodule {
    /// Integer voxel containing the center, or `None` if it lies outside `dims`.
    pub fn voxel(&self, dims: [usize; 3]) -> Option<[usize; 3]> {
        let mut v = [0; 3];
        for a in 0..3 {
            let r = self.center[a].round();
            if !(r >= 0.0 && r < dims[a] as f64) {
                return None;
            }
            v[a] = r as usize;
        }
        Some(v)
    }
}

/// Partition of a chunk into `(S, S, T)` cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridGeometry {
    /// Chunk extents `(x, y, z)` in voxels.
    pub volume: [usize; 3],
    /// Cell counts `(S, S, T)`.
    pub grid: [usize; 3],
    /// Cell extents `(x, y, z)` in voxels.
    pub cell: [usize; 3],
}

impl GridGeometry {
    pub fn new(volume: [usize; 3], grid: [usize; 3]) -> Result<Self> {
        let mut cell = [0; 3];
        for a in 0..3 {
            if grid[a] == 0 || volume[a] == 0 || volume[a] % grid[a] != 0 {
                return Err(Error::Geometry(format!(
                    "volume {volume:?} does not divide into grid {grid:?} along {}",
                    ["x", "y", "z"][a]
                )));
            }
            cell[a] = volume[a] / grid[a];
        }
        Ok(GridGeometry { volume, grid, cell })
    }

    /// Total number of cells `k_n`.
    pub fn cell_count(&self) -> usize {
        self.grid.iter().product()
    }

    /// Cell `(s1, s2, t)` holding voxel `(x, y, z)`.
    pub fn cell_of(&self, voxel: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| voxel[a] / self.cell[a])
    }

    /// Row-major index of a cell in a `(T, S, S)` tensor.
    pub fn linear(&self, cell: [usize; 3]) -> usize {
        (cell[2] * self.grid[1] + cell[1]) * self.grid[0] + cell[0]
    }

    pub fn unlinear(&self, index: usize) -> [usize; 3] {
        let x = index % self.grid[0];
        let y = (index / self.grid[0]) % self.grid[1];
        let z = index / (self.grid[0] * self.grid[1]);
        [x, y, z]
    }
}

/// An annotation that could not be placed in the chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct SkippedNodule {
    pub id: usize,
    pub center: [f64; 3],
    pub reason: String,
}

/// Binary occupancy grid of shape `(T, S, S)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridLabels {
    pub grid: Tensor<f64>,
    pub geometry: GridGeometry,
}

impl GridLabels {
    pub fn cell_count(&self) -> usize {
        self.geometry.cell_count()
    }

    pub fn positives(&self) -> usize {
        self.grid.data().iter().filter(|&&v| v > 0.5).count()
    }

    pub fn get(&self, cell: [usize; 3]) -> f64 {
        self.grid.data()[self.geometry.linear(cell)]
    }
}

/// Marks the cell containing each nodule center. Centers outside the chunk are
/// returned as skip records rather than errors, since tiling legitimately
/// separates nodules from most chunks.
pub fn encode_labels(nodules: &[VoxelNodule], geometry: &GridGeometry) -> (GridLabels, Vec<SkippedNodule>) {
    let [s1, s2, t] = geometry.grid;
    let mut grid = Tensor::zeros(vec![t, s2, s1]);
    let mut skipped = Vec::new();
    for n in nodules {
        match n.voxel(geometry.volume) {
            Some(v) => {
                let at = geometry.linear(geometry.cell_of(v));
                grid.data_mut()[at] = 1.0;
            }
            None => skipped.push(SkippedNodule {
                id: n.id,
                center: n.center,
                reason: format!("center outside chunk {:?}", geometry.volume),
            }),
        }
    }
    (
        GridLabels {
            grid,
            geometry: *geometry,
        },
        skipped,
    )
}

/// Resolved class weights and normalization for one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BceWeights {
    pub pos: f64,
    pub neg: f64,
    pub reduction: LossReduction,
    pub terms: LossTerms,
}

impl BceWeights {
    pub fn unit() -> Self {
        BceWeights {
            pos: 1.0,
            neg: 1.0,
            reduction: LossReduction::Mean,
            terms: LossTerms::TwoSided,
        }
    }

    /// Resolves an automatic positive weight against the labels of a batch.
    pub fn for_batch(config: &LossConfig, labels: &[f64]) -> Self {
        let pos = match config.pos_weight {
            PosWeight::Fixed(w) => w,
            PosWeight::Auto { max } => auto_pos_weight(labels, max),
        };
        BceWeights {
            pos,
            neg: config.neg_weight,
            reduction: config.reduction,
            terms: config.terms,
        }
    }
}

/// `zeros / ones` clipped to `[1, max]`; 1 when the batch has no positives.
pub fn auto_pos_weight(labels: &[f64], max: f64) -> f64 {
    let ones = labels.iter().filter(|&&y| y > 0.5).count();
    if ones == 0 {
        return 1.0;
    }
    let zeros = labels.len() - ones;
    (zeros as f64 / ones as f64).clamp(1.0, max)
}

/// Weighted binary cross-entropy and its gradient with respect to `pred`.
///
/// `L = scale * sum_i [ w+ y_i (-ln f_i) + w- (1 - y_i) (-ln(1 - f_i)) ]` with
/// `f_i` clamped and `scale = 1 / len` for mean reduction. The gradient is the
/// analytic derivative evaluated at the clamped value.
pub fn weighted_bce<T: Real>(pred: &Tensor<T>, labels: &Tensor<T>, w: &BceWeights) -> Result<(T, Tensor<T>)> {
    if pred.shape() != labels.shape() {
        let axis = pred
            .shape()
            .iter()
            .zip(labels.shape())
            .position(|(a, b)| a != b)
            .unwrap_or(pred.rank().min(labels.rank()));
        return Err(Error::dim(
            format!("prediction axis {axis}"),
            labels.shape().get(axis).copied().unwrap_or(0),
            pred.shape().get(axis).copied().unwrap_or(0),
        ));
    }
    let scale = match w.reduction {
        LossReduction::Mean => 1.0 / pred.len() as f64,
        LossReduction::Sum => 1.0,
    };
    let neg = match w.terms {
        LossTerms::TwoSided => w.neg,
        LossTerms::OneSided => 0.0,
    };
    let (lo, hi) = (CLAMP, 1.0 - CLAMP);
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.data().iter().zip(labels.data()) {
        let f = p.as_f64().clamp(lo, hi);
        let y = y.as_f64();
        total += w.pos * y * -f.ln() + neg * (1.0 - y) * -(1.0 - f).ln();
        grad.push(T::of(scale * (-w.pos * y / f + neg * (1.0 - y) / (1.0 - f))));
    }
    if !total.is_finite() {
        return Err(Error::Numeric("cross-entropy is not finite".into()));
    }
    Ok((T::of(total * scale), Tensor::new(pred.shape().to_vec(), grad)?))
}

/// Records [`weighted_bce`] of `pred` on the tape.
pub fn bce_on_tape<T: Real>(tape: &mut Tape<T>, pred: &Var<T>, labels: &Tensor<T>, w: &BceWeights) -> Result<Var<T>> {
    let (loss, grad) = weighted_bce(pred.value(), labels, w)?;
    tape.loss(pred, loss, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShiftDirection {
    PlusX,
    MinusX,
    PlusY,
    MinusY,
}

impl ShiftDirection {
    pub const ALL: [ShiftDirection; 4] = [Self::PlusX, Self::MinusX, Self::PlusY, Self::MinusY];

    pub fn opposite(self) -> Self {
        match self {
            Self::PlusX => Self::MinusX,
            Self::MinusX => Self::PlusX,
            Self::PlusY => Self::MinusY,
            Self::MinusY => Self::PlusY,
        }
    }

    /// Signed voxel offset `(dx, dy)` for a shift of `amount`.
    fn offset(self, amount: usize) -> (isize, isize) {
        let a = amount as isize;
        match self {
            Self::PlusX => (a, 0),
            Self::MinusX => (-a, 0),
            Self::PlusY => (0, a),
            Self::MinusY => (0, -a),
        }
    }
}

/// Translates a `(D, H, W)` volume in-plane with zero fill and moves the
/// nodule centers identically, dropping nodules that leave the volume.
pub fn shift_augment<T: Real>(
    volume: &Tensor<T>,
    nodules: &[VoxelNodule],
    direction: ShiftDirection,
    amount: usize,
) -> Result<(Tensor<T>, Vec<VoxelNodule>)> {
    let &[d, h, w] = volume.shape() else {
        return Err(Error::dim("volume rank", 3, volume.rank()));
    };
    let (dx, dy) = direction.offset(amount);
    let extent = if dx != 0 { w } else { h };
    if amount >= extent {
        return Err(Error::Config(format!("shift {amount} is not below extent {extent}")));
    }
    let mut out = Tensor::zeros(vec![d, h, w]);
    let src = volume.data();
    let dst = out.data_mut();
    for z in 0..d {
        for y in 0..h {
            let sy = y as isize - dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let (x0, x1) = if dx >= 0 { (dx as usize, w) } else { (0, (w as isize + dx) as usize) };
            let row_dst = (z * h + y) * w;
            let row_src = (z * h + sy as usize) * w;
            let sx0 = (x0 as isize - dx) as usize;
            dst[row_dst + x0..row_dst + x1].copy_from_slice(&src[row_src + sx0..row_src + sx0 + (x1 - x0)]);
        }
    }
    let moved = nodules
        .iter()
        .map(|n| {
            let mut m = n.clone();
            m.center[0] += dx as f64;
            m.center[1] += dy as f64;
            m
        })
        .filter(|m| m.voxel([w, h, d]).is_some())
        .collect();
    Ok((out, moved))
}
