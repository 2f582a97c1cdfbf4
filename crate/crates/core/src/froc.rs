//! Candidate extraction, hit matching, FROC curves and the CPM score.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{GridGeometry, VoxelNodule};
use crate::tensor::Tensor;

/// False positives per scan at which sensitivity is averaged.
pub const CPM_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// A scored grid cell of one scan. Cells are `(x, y, z)` indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(rename = "seriesuid")]
    pub scan_id: String,
    #[serde(rename = "cellX")]
    pub cell_x: usize,
    #[serde(rename = "cellY")]
    pub cell_y: usize,
    #[serde(rename = "cellZ")]
    pub cell_z: usize,
    #[serde(rename = "probability")]
    pub confidence: f64,
}

impl Candidate {
    pub fn new(scan_id: impl Into<String>, cell: [usize; 3], confidence: f64) -> Self {
        Candidate {
            scan_id: scan_id.into(),
            cell_x: cell[0],
            cell_y: cell[1],
            cell_z: cell[2],
            confidence,
        }
    }

    pub fn cell(&self) -> [usize; 3] {
        [self.cell_x, self.cell_y, self.cell_z]
    }

    fn order_key(&self) -> (usize, usize, usize) {
        (self.cell_z, self.cell_y, self.cell_x)
    }
}

/// One candidate per cell of a `(T, S, S)` probability grid whose value is at least `floor`.
pub fn extract_candidates(grid: &Tensor<f64>, scan_id: &str, floor: f64) -> Vec<Candidate> {
    let &[t, s1, s0] = grid.shape() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for z in 0..t {
        for y in 0..s1 {
            for x in 0..s0 {
                let p = grid.data()[(z * s1 + y) * s0 + x];
                if p >= floor {
                    out.push(Candidate::new(scan_id, [x, y, z], p));
                }
            }
        }
    }
    out
}

/// A ground-truth nodule located in a scan-level cell.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct TruthCell {
    pub scan_id: String,
    pub nodule_id: usize,
    pub cell: [usize; 3],
}

/// Places a scan's nodules in cells of size `geometry.cell`. The geometry's
/// volume must cover the scan; nodules outside it are a validation error.
pub fn truth_cells(scan_id: &str, nodules: &[VoxelNodule], geometry: &GridGeometry) -> Result<Vec<TruthCell>> {
    nodules
        .iter()
        .map(|n| {
            let voxel = n.voxel(geometry.volume).ok_or_else(|| {
                Error::Validation(format!(
                    "nodule {} of scan {scan_id} at {:?} lies outside the {:?} volume",
                    n.id, n.center, geometry.volume
                ))
            })?;
            Ok(TruthCell {
                scan_id: scan_id.to_string(),
                nodule_id: n.id,
                cell: geometry.cell_of(voxel),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    /// Best hitting candidate for the listed nodules.
    TruePositive(Vec<usize>),
    /// Hits a nodule already credited to a stronger candidate.
    Ignored,
    FalsePositive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCandidate {
    pub candidate: Candidate,
    pub outcome: Outcome,
}

/// Per-nodule detection record.
#[derive(Clone, Debug, PartialEq)]
pub struct NoduleHit {
    pub scan_id: String,
    pub nodule_id: usize,
    /// Confidence of the crediting candidate, if any.
    pub confidence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub candidates: Vec<LabeledCandidate>,
    pub nodules: Vec<NoduleHit>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.nodules.iter().filter(|n| n.confidence.is_some()).count()
    }

    pub fn false_positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.outcome == Outcome::FalsePositive).count()
    }
}

/// Labels candidates against ground-truth cells. A candidate hits when its
/// cell holds a nodule. Each nodule is credited to its highest-confidence
/// hitting candidate (ties go to the lowest cell index, then input order);
/// other hits on it are ignored. Non-hitting candidates are false positives.
///
/// Two candidates on the same `(scan, cell)` are a validation error unless
/// `allow_duplicates` is set.
pub fn match_candidates(candidates: &[Candidate], truth: &[TruthCell], allow_duplicates: bool) -> Result<Matching> {
    let mut seen = HashSet::new();
    for c in candidates {
        if !c.confidence.is_finite() {
            return Err(Error::Validation(format!("candidate {c:?} has a non-finite confidence")));
        }
        if !seen.insert((c.scan_id.as_str(), c.cell())) && !allow_duplicates {
            return Err(Error::Validation(format!(
                "duplicate candidate for scan {} cell {:?}",
                c.scan_id,
                c.cell()
            )));
        }
    }
    let mut truth_sorted: Vec<&TruthCell> = truth.iter().collect();
    truth_sorted.sort();
    let mut by_cell: HashMap<(&str, [usize; 3]), Vec<usize>> = HashMap::new();
    for (k, t) in truth_sorted.iter().enumerate() {
        by_cell.entry((t.scan_id.as_str(), t.cell)).or_default().push(k);
    }
    // Best candidate per nodule (index into `truth_sorted`).
    let mut best: Vec<Option<usize>> = vec![None; truth_sorted.len()];
    for (i, c) in candidates.iter().enumerate() {
        let Some(hit) = by_cell.get(&(c.scan_id.as_str(), c.cell())) else {
            continue;
        };
        for &k in hit {
            let better = match best[k] {
                None => true,
                Some(j) => {
                    let b = &candidates[j];
                    c.confidence > b.confidence || (c.confidence == b.confidence && c.order_key() < b.order_key())
                }
            };
            if better {
                best[k] = Some(i);
            }
        }
    }
    let mut credited: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, b) in best.iter().enumerate() {
        if let Some(i) = b {
            credited.entry(*i).or_default().push(truth_sorted[k].nodule_id);
        }
    }
    let labeled = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let outcome = if let Some(ids) = credited.remove(&i) {
                Outcome::TruePositive(ids)
            } else if by_cell.contains_key(&(c.scan_id.as_str(), c.cell())) {
                Outcome::Ignored
            } else {
                Outcome::FalsePositive
            };
            LabeledCandidate {
                candidate: c.clone(),
                outcome,
            }
        })
        .collect();
    let nodules = truth_sorted
        .iter()
        .zip(&best)
        .map(|(t, b)| NoduleHit {
            scan_id: t.scan_id.clone(),
            nodule_id: t.nodule_id,
            confidence: b.map(|i| candidates[i].confidence),
        })
        .collect();
    Ok(Matching {
        candidates: labeled,
        nodules,
    })
}

/// Sensitivity versus false positives per scan.
#[derive(Clone, Debug, PartialEq)]
pub struct FrocCurve {
    /// `(fp_per_scan, sensitivity)`, ascending in both coordinates.
    pub points: Vec<(f64, f64)>,
    pub scan_count: usize,
    pub nodule_count: usize,
}

/// Sweeps the threshold through every distinct confidence, from strictest
/// to loosest, recording one point per threshold, and prepends a point at
/// zero false positives carrying the strictest threshold's sensitivity.
pub fn froc(matching: &Matching, scan_count: usize) -> Result<FrocCurve> {
    let nodule_count = matching.nodules.len();
    if nodule_count == 0 {
        return Err(Error::Validation("sensitivity is undefined without nodules".into()));
    }
    if scan_count == 0 {
        return Err(Error::Validation("false positives per scan are undefined without scans".into()));
    }
    // (confidence, is_fp, newly credited nodules)
    let mut events: Vec<(f64, usize, usize)> = Vec::new();
    for c in &matching.candidates {
        match c.outcome {
            Outcome::FalsePositive => events.push((c.candidate.confidence, 1, 0)),
            Outcome::TruePositive(_) | Outcome::Ignored => {}
        }
    }
    for n in &matching.nodules {
        if let Some(conf) = n.confidence {
            events.push((conf, 0, 1));
        }
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let threshold = events[i].0;
        while i < events.len() && events[i].0 == threshold {
            fp += events[i].1;
            tp += events[i].2;
            i += 1;
        }
        points.push((fp as f64 / scan_count as f64, tp as f64 / nodule_count as f64));
    }
    let first = points.first().map_or(0.0, |p| p.1);
    points.insert(0, (0.0, first));
    Ok(FrocCurve {
        points,
        scan_count,
        nodule_count,
    })
}

impl FrocCurve {
    /// Sensitivity at `rate` false positives per scan by linear interpolation,
    /// taking the upper value at vertical steps.
    pub fn sensitivity_at(&self, rate: f64) -> f64 {
        let pts = &self.points;
        match pts.iter().rposition(|p| p.0 <= rate) {
            None => 0.0,
            Some(i) if i + 1 == pts.len() => pts[i].1,
            Some(i) => {
                let (a, b) = (pts[i], pts[i + 1]);
                a.1 + (b.1 - a.1) * (rate - a.0) / (b.0 - a.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CpmReport {
    pub sensitivities: [f64; 7],
    pub cpm: f64,
    pub scan_count: usize,
    pub nodule_count: usize,
}

pub fn cpm(curve: &FrocCurve) -> CpmReport {
    let sensitivities = CPM_RATES.map(|r| curve.sensitivity_at(r));
    CpmReport {
        cpm: sensitivities.iter().sum::<f64>() / CPM_RATES.len() as f64,
        sensitivities,
        scan_count: curve.scan_count,
        nodule_count: curve.nodule_count,
    }
}

/// Matching, curve and score in one call.
pub fn evaluate(candidates: &[Candidate], truth: &[TruthCell], scan_count: usize) -> Result<(FrocCurve, CpmReport)> {
    let curve = froc(&match_candidates(candidates, truth, false)?, scan_count)?;
    let report = cpm(&curve);
    Ok((curve, report))
}

impl CpmReport {
    /// Fixed-width text table of rate and sensitivity, closed by the CPM row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>10}  {:>11}", "FP/scan", "sensitivity");
        for (r, v) in CPM_RATES.iter().zip(&self.sensitivities) {
            let _ = writeln!(s, "{r:>10}  {v:>11.4}");
        }
        let _ = writeln!(s, "{:>10}  {:>11.4}", "CPM", self.cpm);
        let _ = writeln!(s, "({} scans, {} nodules)", self.scan_count, self.nodule_count);
        s
    }

    /// `rate,sensitivity` rows followed by a `cpm` row.
    pub fn csv(&self) -> String {
        let mut s = String::from("rate,sensitivity\n");
        for (r, v) in CPM_RATES.iter().zip(&self.sensitivities) {
            let _ = writeln!(s, "{r},{v:?}");
        }
        let _ = writeln!(s, "cpm,{:?}", self.cpm);
        s
    }
}

pub fn write_candidates(path: &Path, candidates: &[Candidate]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::parse(path.display().to_string(), None, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if candidates.is_empty() {
        w.write_record(["seriesuid", "cellX", "cellY", "cellZ", "probability"]).map_err(csv_err)?;
    }
    for c in candidates {
        w.serialize(c).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_candidates(path: &Path) -> Result<Vec<Candidate>> {
    let name = path.display().to_string();
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(&name, None, format!("{other:?}")),
    })?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let c: Candidate =
            row.map_err(|e| Error::parse(&name, e.position().map(|p| p.line() as usize), e.to_string()))?;
        out.push(c);
    }
    Ok(out)
}
