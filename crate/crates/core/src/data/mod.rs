//! Scans, annotations, chunking and cross-validation splits.

pub mod metaimage;
pub mod phantom;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::VoxelNodule;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub use metaimage::{read_metaimage, write_metaimage, ElementType, VolumeMeta};
pub use phantom::{generate_phantom, local_background_mean, Phantom, PhantomSpec};

/// Clips to `window` and rescales linearly onto `[0, 1]`.
pub fn normalize_hu(volume: &Tensor<f64>, window: [f64; 2]) -> Result<Tensor<f64>> {
    let [lo, hi] = window;
    if !(lo < hi) {
        return Err(Error::Config(format!("HU window {window:?} is empty")));
    }
    let span = hi - lo;
    Ok(volume.map(|v| (v.clamp(lo, hi) - lo) / span))
}

/// A depth slab of a scan with the nodules it contains in slab-local coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    /// `(depth, H, W)`.
    pub volume: Tensor<f64>,
    pub nodules: Vec<VoxelNodule>,
    /// First scan slice covered by the chunk.
    pub z_offset: usize,
}

fn slab(volume: &Tensor<f64>, nodules: &[VoxelNodule], depth: usize, z_offset: usize) -> Chunk {
    let &[d, h, w] = volume.shape() else { unreachable!() };
    let plane = h * w;
    let mut data = vec![0.0; depth * plane];
    let take = depth.min(d.saturating_sub(z_offset));
    data[..take * plane].copy_from_slice(&volume.data()[z_offset * plane..(z_offset + take) * plane]);
    let nodules = nodules
        .iter()
        .filter_map(|n| {
            let mut m = n.clone();
            m.center[2] -= z_offset as f64;
            m.voxel([w, h, take]).map(|_| m)
        })
        .collect();
    Chunk {
        volume: Tensor::new(vec![depth, h, w], data).expect("slab shape"),
        nodules,
        z_offset,
    }
}

fn depth_of(volume: &Tensor<f64>) -> Result<usize> {
    match volume.shape() {
        &[d, _, _] => Ok(d),
        _ => Err(Error::dim("volume rank", 3, volume.rank())),
    }
}

/// Splits a `(D, H, W)` scan into chunks of `depth` slices starting every
/// `stride` slices. The last chunk is zero-padded past the end of the scan.
/// Each nodule is assigned to every chunk that contains its center slice.
pub fn tile_z(volume: &Tensor<f64>, nodules: &[VoxelNodule], depth: usize, stride: usize) -> Result<Vec<Chunk>> {
    let d = depth_of(volume)?;
    if depth == 0 || stride == 0 {
        return Err(Error::Config("chunk depth and stride must be >= 1".into()));
    }
    if stride > depth {
        return Err(Error::Config(format!("chunk stride {stride} exceeds depth {depth}, slices would be skipped")));
    }
    let mut chunks = Vec::new();
    let mut offset = 0;
    loop {
        chunks.push(slab(volume, nodules, depth, offset));
        if offset + depth >= d {
            break;
        }
        offset += stride;
    }
    Ok(chunks)
}

/// Extracts a training chunk of `depth` slices. When the scan has nodules the
/// window is placed uniformly among the offsets that contain a randomly chosen
/// nodule; otherwise it is placed uniformly over the scan.
pub fn random_z_crop(volume: &Tensor<f64>, nodules: &[VoxelNodule], depth: usize, rng: &mut impl Rng) -> Result<Chunk> {
    let d = depth_of(volume)?;
    if depth == 0 {
        return Err(Error::Config("chunk depth must be >= 1".into()));
    }
    if d <= depth {
        return Ok(slab(volume, nodules, depth, 0));
    }
    let last = d - depth;
    let inside: Vec<&VoxelNodule> = nodules.iter().filter(|n| (n.center[2].round() as isize) >= 0).collect();
    let offset = match inside.choose(rng) {
        Some(n) => {
            let z = (n.center[2].round() as usize).min(d - 1);
            let lo = (z + 1).saturating_sub(depth);
            let hi = z.min(last);
            rng.gen_range(lo..=hi)
        }
        None => rng.gen_range(0..=last),
    };
    Ok(slab(volume, nodules, depth, offset))
}

/// Merges per-chunk prediction grids `(T, S, S)` into one scan-level grid by
/// taking the maximum where chunks overlap. `cell_z` is the slab depth of one
/// grid cell and must divide every chunk offset.
pub fn merge_chunk_grids(grids: &[(Tensor<f64>, usize)], cell_z: usize) -> Result<Tensor<f64>> {
    let Some((first, _)) = grids.first() else {
        return Err(Error::Validation("no chunk predictions to merge".into()));
    };
    let &[t, s1, s0] = first.shape() else {
        return Err(Error::dim("grid rank", 3, first.rank()));
    };
    if cell_z == 0 {
        return Err(Error::Geometry("cell depth must be >= 1".into()));
    }
    let mut total = 0;
    for (g, off) in grids {
        if g.shape() != first.shape() {
            return Err(Error::Geometry(format!("chunk grid {:?} differs from {:?}", g.shape(), first.shape())));
        }
        if off % cell_z != 0 {
            return Err(Error::Geometry(format!(
                "chunk offset {off} is not a multiple of the cell depth {cell_z}"
            )));
        }
        total = total.max(off / cell_z + t);
    }
    let plane = s1 * s0;
    let mut out = vec![f64::NEG_INFINITY; total * plane];
    for (g, off) in grids {
        let base = off / cell_z * plane;
        for (o, &v) in out[base..base + t * plane].iter_mut().zip(g.data()) {
            *o = o.max(v);
        }
    }
    Tensor::new(vec![total, s1, s0], out)
}

/// Partitions `ids` into `k` folds after a seeded shuffle. The first
/// `n mod k` folds receive one extra id.
pub fn kfold_split(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k == 0 || k > ids.len() {
        return Err(Error::Config(format!("cannot split {} scans into {k} folds", ids.len())));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.dedup();
    if shuffled.len() != ids.len() {
        return Err(Error::Validation("scan ids must be unique".into()));
    }
    shuffled.shuffle(&mut rng::stream(seed, Stream::Split));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut folds = Vec::with_capacity(k);
    let mut rest = shuffled.as_slice();
    for f in 0..k {
        let (head, tail) = rest.split_at(base + usize::from(f < extra));
        folds.push(head.to_vec());
        rest = tail;
    }
    Ok(folds)
}

/// One annotated nodule in world coordinates (millimetres).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "seriesuid")]
    pub scan_id: String,
    #[serde(rename = "coordX")]
    pub x: f64,
    #[serde(rename = "coordY")]
    pub y: f64,
    #[serde(rename = "coordZ")]
    pub z: f64,
    pub diameter_mm: f64,
}

impl Annotation {
    pub fn world(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    Error::parse(path.display().to_string(), line, e.to_string())
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path.display().to_string(), None, format!("{other:?}")),
    })?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let a: Annotation = row.map_err(|e| csv_error(path, e))?;
        if !(a.diameter_mm > 0.0) || !a.world().iter().all(|v| v.is_finite()) {
            return Err(Error::Validation(format!(
                "{}: annotation for {} has a non-finite coordinate or non-positive diameter",
                path.display(),
                a.scan_id
            )));
        }
        out.push(a);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for a in annotations {
        writer.serialize(a).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Converts a scan's annotations to voxel nodules; ids follow annotation order.
pub fn annotations_to_voxels(annotations: &[&Annotation], meta: &VolumeMeta) -> Vec<VoxelNodule> {
    annotations
        .iter()
        .enumerate()
        .map(|(id, a)| VoxelNodule {
            id,
            center: meta.world_to_voxel(a.world()),
            diameter_mm: a.diameter_mm,
        })
        .collect()
}

/// A scan loaded into memory.
#[derive(Clone, Debug)]
pub struct Scan {
    pub id: String,
    /// `(D, H, W)` in Hounsfield units.
    pub volume: Tensor<f64>,
    pub meta: VolumeMeta,
    pub nodules: Vec<VoxelNodule>,
}

/// A dataset directory: `annotations.csv` plus `scans/<id>.mhd` with payloads.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub ids: Vec<String>,
    annotations: BTreeMap<String, Vec<Annotation>>,
}

impl Dataset {
    pub const ANNOTATIONS: &'static str = "annotations.csv";
    pub const SCANS: &'static str = "scans";

    pub fn open(root: &Path) -> Result<Self> {
        let scans = root.join(Self::SCANS);
        let entries = fs::read_dir(&scans).map_err(|e| Error::io(&scans, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&scans, e))?.path();
            if path.extension().is_some_and(|e| e == "mhd") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::Validation(format!("no .mhd scans under {}", scans.display())));
        }
        ids.sort();
        let mut annotations: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
        for a in read_annotations(&root.join(Self::ANNOTATIONS))? {
            if ids.binary_search(&a.scan_id).is_err() {
                return Err(Error::Validation(format!("annotation refers to unknown scan {}", a.scan_id)));
            }
            annotations.entry(a.scan_id.clone()).or_default().push(a);
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            ids,
            annotations,
        })
    }

    pub fn header_path(&self, id: &str) -> PathBuf {
        self.root.join(Self::SCANS).join(format!("{id}.mhd"))
    }

    pub fn annotations(&self, id: &str) -> &[Annotation] {
        self.annotations.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.values().flatten()
    }

    pub fn load(&self, id: &str) -> Result<Scan> {
        let (volume, meta) = read_metaimage(&self.header_path(id))?;
        let refs: Vec<&Annotation> = self.annotations(id).iter().collect();
        let nodules = annotations_to_voxels(&refs, &meta);
        Ok(Scan {
            id: id.to_string(),
            volume,
            meta,
            nodules,
        })
    }

    /// Writes scans and their annotations as a dataset directory.
    pub fn write(root: &Path, scans: &[Scan]) -> Result<()> {
        let dir = root.join(Self::SCANS);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut annotations = Vec::new();
        for scan in scans {
            write_metaimage(&dir.join(format!("{}.mhd", scan.id)), &scan.volume, &scan.meta)?;
            for n in &scan.nodules {
                let [x, y, z] = scan.meta.voxel_to_world(n.center);
                annotations.push(Annotation {
                    scan_id: scan.id.clone(),
                    x,
                    y,
                    z,
                    diameter_mm: n.diameter_mm,
                });
            }
        }
        write_annotations(&root.join(Self::ANNOTATIONS), &annotations)
    }
}

/// Generates `count` phantoms; the phantom with number `i` uses seed `base.seed + i`.
pub fn generate_phantom_set(base: &PhantomSpec, count: usize) -> Result<Vec<Scan>> {
    (0..count)
        .map(|i| {
            let spec = PhantomSpec {
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            };
            let p = generate_phantom(&spec)?;
            Ok(Scan {
                id: format!("phantom_{:04}", i),
                volume: p.volume,
                meta: p.meta,
                nodules: p.nodules,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nod(id: usize, z: f64) -> VoxelNodule {
        VoxelNodule {
            id,
            center: [1.0, 1.0, z],
            diameter_mm: 4.0,
        }
    }

    fn ramp(d: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![d, 2, 2], |i| (i / 4) as f64 + 1.0)
    }

    #[test]
    fn normalize_window_maps_onto_unit_interval() {
        let v = Tensor::new(vec![1, 1, 4], vec![-2000.0, -1000.0, -300.0, 900.0]).unwrap();
        let n = normalize_hu(&v, [-1000.0, 400.0]).unwrap();
        assert_eq!(n.data(), &[0.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn tiling_covers_scan_and_pads_tail() {
        let chunks = tile_z(&ramp(20), &[nod(0, 17.0)], 8, 8).unwrap();
        let offsets: Vec<usize> = chunks.iter().map(|c| c.z_offset).collect();
        assert_eq!(offsets, vec![0, 8, 16]);
        let last = &chunks[2];
        assert_eq!(last.volume.get(&[3, 0, 0]), 20.0);
        assert_eq!(last.volume.get(&[4, 0, 0]), 0.0);
        assert_eq!(last.nodules, vec![nod(0, 1.0)]);
        assert!(chunks[0].nodules.is_empty());
    }

    #[test]
    fn overlapping_tiles_share_nodules() {
        let chunks = tile_z(&ramp(16), &[nod(3, 6.0)], 8, 4).unwrap();
        assert_eq!(chunks.iter().map(|c| c.z_offset).collect::<Vec<_>>(), vec![0, 4, 8]);
        assert_eq!(chunks[0].nodules[0].center[2], 6.0);
        assert_eq!(chunks[1].nodules[0].center[2], 2.0);
        assert!(chunks[2].nodules.is_empty());
    }

    #[test]
    fn crop_contains_chosen_nodule() {
        let mut rng = rng::stream(1, Stream::Crop);
        for _ in 0..50 {
            let c = random_z_crop(&ramp(32), &[nod(0, 29.0)], 8, &mut rng).unwrap();
            assert_eq!(c.nodules.len(), 1);
            assert!(c.z_offset <= 24);
            assert_eq!(c.volume.get(&[0, 0, 0]), c.z_offset as f64 + 1.0);
        }
    }

    #[test]
    fn merge_takes_max_over_overlap() {
        let a = Tensor::full(vec![2, 1, 1], 0.2);
        let b = Tensor::new(vec![2, 1, 1], vec![0.5, 0.1]).unwrap();
        let m = merge_chunk_grids(&[(a, 0), (b, 1)], 1).unwrap();
        assert_eq!(m.data(), &[0.2, 0.5, 0.1]);
        let c = Tensor::full(vec![2, 1, 1], 0.0);
        assert!(merge_chunk_grids(&[(c, 3)], 2).is_err());
    }

    #[test]
    fn kfold_sizes_and_disjointness() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let folds = kfold_split(&ids, 3, 4).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        let mut all: Vec<String> = folds.concat();
        all.sort();
        let mut expected = ids.clone();
        expected.sort();
        assert_eq!(all, expected);
        assert_eq!(folds, kfold_split(&ids, 3, 4).unwrap());
        assert!(kfold_split(&ids, 11, 0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            dims: [32, 32, 8],
            spacing: [1.0, 1.0, 2.5],
            nodule_diameter_mm: [4.0, 8.0],
            seed: 3,
            ..PhantomSpec::default()
        };
        let scans = generate_phantom_set(&spec, 3).unwrap();
        Dataset::write(dir.path(), &scans).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.ids.len(), 3);
        for s in &scans {
            let back = ds.load(&s.id).unwrap();
            assert_eq!(back.volume, s.volume);
            assert_eq!(back.nodules.len(), s.nodules.len());
            for (a, b) in back.nodules.iter().zip(&s.nodules) {
                assert_eq!(a.voxel(s.meta.dims), b.voxel(s.meta.dims));
            }
        }
    }

    #[test]
    fn malformed_annotation_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "seriesuid,coordX,coordY,coordZ,diameter_mm\ns,1,2,3,4\ns,1,oops,3,4\n").unwrap();
        match read_annotations(&p) {
            Err(Error::Parse { line: Some(3), .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
