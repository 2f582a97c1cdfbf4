//! Synthetic chest-CT-like volumes with planted nodules and vessel distractors.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::metaimage::{ElementType, VolumeMeta};
use crate::config::{parse_list, parse_one};
use crate::error::{Error, Result};
use crate::loss::VoxelNodule;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Parameters of the phantom generator. Ranges are inclusive `[lo, hi]`;
/// triples are `(x, y, z)`; intensities are in Hounsfield-like units.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub nodule_count: [usize; 2],
    pub nodule_diameter_mm: [f64; 2],
    pub vessel_count: [usize; 2],
    pub vessel_radius_mm: [f64; 2],
    /// Standard deviation of the additive Gaussian noise.
    pub noise_hu: f64,
    /// Tissue surrounding the lung field.
    pub background_hu: [f64; 2],
    pub parenchyma_hu: [f64; 2],
    pub nodule_hu: [f64; 2],
    pub vessel_hu: [f64; 2],
    /// Width of the smooth boundary of nodules and vessels.
    pub edge_mm: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [128, 128, 32],
            spacing: [0.8, 0.8, 1.25],
            nodule_count: [1, 3],
            nodule_diameter_mm: [3.0, 32.0],
            vessel_count: [2, 6],
            vessel_radius_mm: [0.75, 2.5],
            noise_hu: 20.0,
            background_hu: [0.0, 60.0],
            parenchyma_hu: [-870.0, -800.0],
            nodule_hu: [-60.0, 60.0],
            vessel_hu: [-60.0, 60.0],
            edge_mm: 0.5,
            seed: 0,
        }
    }
}

const MAX_ATTEMPTS: usize = 200;

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

impl PhantomSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut spec = PhantomSpec::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::parse(source_name, Some(idx + 1), m);
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let (k, v) = (k.trim(), v.trim());
            spec.apply(k, v).map_err(|m| err(format!("{k}: {m}")))?;
        }
        spec.validate()?;
        Ok(spec)
    }

    fn apply(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn arr<T: std::str::FromStr + Copy, const N: usize>(v: &str) -> std::result::Result<[T; N], String> {
            let list: Vec<T> = parse_list(v)?;
            list.try_into().map_err(|_| format!("expected {N} values"))
        }
        match key {
            "dims" => self.dims = arr(value)?,
            "spacing" => self.spacing = arr(value)?,
            "nodule_count" => self.nodule_count = arr(value)?,
            "nodule_diameter_mm" => self.nodule_diameter_mm = arr(value)?,
            "vessel_count" => self.vessel_count = arr(value)?,
            "vessel_radius_mm" => self.vessel_radius_mm = arr(value)?,
            "noise_hu" => self.noise_hu = parse_one(value)?,
            "background_hu" => self.background_hu = arr(value)?,
            "parenchyma_hu" => self.parenchyma_hu = arr(value)?,
            "nodule_hu" => self.nodule_hu = arr(value)?,
            "vessel_hu" => self.vessel_hu = arr(value)?,
            "edge_mm" => self.edge_mm = parse_one(value)?,
            "seed" => self.seed = parse_one(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let f2 = |r: [f64; 2]| format!("{:?} {:?}", r[0], r[1]);
        let _ = writeln!(s, "dims = {} {} {}", self.dims[0], self.dims[1], self.dims[2]);
        let _ = writeln!(s, "spacing = {:?} {:?} {:?}", self.spacing[0], self.spacing[1], self.spacing[2]);
        let _ = writeln!(s, "nodule_count = {} {}", self.nodule_count[0], self.nodule_count[1]);
        let _ = writeln!(s, "nodule_diameter_mm = {}", f2(self.nodule_diameter_mm));
        let _ = writeln!(s, "vessel_count = {} {}", self.vessel_count[0], self.vessel_count[1]);
        let _ = writeln!(s, "vessel_radius_mm = {}", f2(self.vessel_radius_mm));
        let _ = writeln!(s, "noise_hu = {:?}", self.noise_hu);
        let _ = writeln!(s, "background_hu = {}", f2(self.background_hu));
        let _ = writeln!(s, "parenchyma_hu = {}", f2(self.parenchyma_hu));
        let _ = writeln!(s, "nodule_hu = {}", f2(self.nodule_hu));
        let _ = writeln!(s, "vessel_hu = {}", f2(self.vessel_hu));
        let _ = writeln!(s, "edge_mm = {:?}", self.edge_mm);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Physical extent `(x, y, z)` in millimetres.
    pub fn extent_mm(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("phantom spec: {m}")));
        if self.dims.contains(&0) {
            return bad(format!("dims {:?} must be >= 1", self.dims));
        }
        if !self.spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        if self.nodule_count[0] > self.nodule_count[1] || self.vessel_count[0] > self.vessel_count[1] {
            return bad("count ranges must satisfy lo <= hi".into());
        }
        for (name, r) in [
            ("nodule_diameter_mm", self.nodule_diameter_mm),
            ("vessel_radius_mm", self.vessel_radius_mm),
            ("background_hu", self.background_hu),
            ("parenchyma_hu", self.parenchyma_hu),
            ("nodule_hu", self.nodule_hu),
            ("vessel_hu", self.vessel_hu),
        ] {
            if !range_ok(r) {
                return bad(format!("{name} {r:?} is not an ordered finite range"));
            }
        }
        let min_extent = self.extent_mm().into_iter().fold(f64::INFINITY, f64::min);
        let [dlo, dhi] = self.nodule_diameter_mm;
        if !(dlo > 0.0 && dhi < min_extent) {
            return bad(format!(
                "nodule diameters {:?} mm must lie within (0, {min_extent}) mm, the smallest volume extent",
                self.nodule_diameter_mm
            ));
        }
        if !(self.vessel_radius_mm[0] > 0.0) {
            return bad("vessel radii must be positive".into());
        }
        if !(self.noise_hu >= 0.0) || !(self.edge_mm > 0.0) {
            return bad("noise_hu must be >= 0 and edge_mm > 0".into());
        }
        Ok(())
    }
}

/// A generated scan: volume `(D, H, W)`, header and the planted nodules in voxel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Tensor<f64>,
    pub meta: VolumeMeta,
    pub nodules: Vec<VoxelNodule>,
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..=r[1])
    }
}

/// Smooth indicator: 1 well inside (`signed_mm < 0`), 0 well outside.
fn soft(signed_mm: f64, edge: f64) -> f64 {
    0.5 * (1.0 - (signed_mm / edge).tanh())
}

struct Blob {
    center: [f64; 3],
    semi_axes: [f64; 3],
    radius: f64,
    hu: f64,
}

struct Tube {
    point: [f64; 3],
    dir: [f64; 3],
    radius: f64,
    hu: f64,
}

/// Generates one phantom, deterministically from `spec.seed`.
///
/// The lung field is an in-plane ellipse of parenchyma inside brighter
/// surrounding tissue. Nodules are soft-edged ellipsoids whose diameters are
/// skewed towards the small end of the range; vessels are soft-edged straight
/// tubes crossing the volume. Values are rounded to integers after noise.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Phantom);
    let [w, h, d] = spec.dims;
    let sp = spec.spacing;
    let mm = |v: [f64; 3]| [v[0] * sp[0], v[1] * sp[1], v[2] * sp[2]];
    let ext = spec.extent_mm();
    let lung_center = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
    let lung_axes = [0.46 * w as f64, 0.46 * h as f64];
    // Elliptic radius of an in-plane voxel position relative to the lung field.
    let lung_rho = |x: f64, y: f64| {
        (((x - lung_center[0]) / lung_axes[0]).powi(2) + ((y - lung_center[1]) / lung_axes[1]).powi(2)).sqrt()
    };

    let background = draw(&mut rng, spec.background_hu);
    let parenchyma = draw(&mut rng, spec.parenchyma_hu);

    let n_nodules = rng.gen_range(spec.nodule_count[0]..=spec.nodule_count[1]);
    let mut blobs: Vec<Blob> = Vec::with_capacity(n_nodules);
    let mut nodules = Vec::with_capacity(n_nodules);
    for id in 0..n_nodules {
        let [dlo, dhi] = spec.nodule_diameter_mm;
        let u: f64 = rng.gen();
        let diameter = dlo * (dhi / dlo).powf(u * u);
        let radius = diameter / 2.0;
        let semi_axes = [0, 1, 2].map(|_| radius * rng.gen_range(0.85..=1.15));
        let hu = draw(&mut rng, spec.nodule_hu);
        let reach = [0, 1, 2].map(|a| (radius / sp[a]).ceil() as usize);
        if (0..3).any(|a| 2 * reach[a] >= spec.dims[a]) {
            return Err(Error::Generation(format!(
                "nodule of {diameter:.2} mm does not fit in {:?} voxels",
                spec.dims
            )));
        }
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let c = [0, 1, 2].map(|a| rng.gen_range(reach[a]..spec.dims[a] - reach[a]) as f64);
            let shrink = 1.0 - radius / (lung_axes[0] * sp[0]).min(lung_axes[1] * sp[1]);
            if shrink <= 0.0 || lung_rho(c[0], c[1]) > shrink {
                continue;
            }
            let cm = mm(c);
            let clear = blobs.iter().all(|b| {
                let bm = mm(b.center);
                let dist = (0..3).map(|a| (cm[a] - bm[a]).powi(2)).sum::<f64>().sqrt();
                dist > 1.15 * (radius + b.radius) + spec.edge_mm * 2.0
            });
            if clear {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place nodule {id} of {diameter:.2} mm after {MAX_ATTEMPTS} attempts"
            ))
        })?;
        blobs.push(Blob {
            center,
            semi_axes,
            radius,
            hu,
        });
        nodules.push(VoxelNodule {
            id,
            center,
            diameter_mm: diameter,
        });
    }

    let n_vessels = rng.gen_range(spec.vessel_count[0]..=spec.vessel_count[1]);
    let mut tubes = Vec::with_capacity(n_vessels);
    for _ in 0..n_vessels {
        let point = [0, 1, 2].map(|a| rng.gen_range(0.2..0.8) * ext[a]);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let tilt: f64 = rng.gen_range(-1.0..1.0);
        let norm = (1.0 + tilt * tilt).sqrt();
        let dir = [theta.cos() / norm, theta.sin() / norm, tilt / norm];
        tubes.push(Tube {
            point,
            dir,
            radius: draw(&mut rng, spec.vessel_radius_mm),
            hu: draw(&mut rng, spec.vessel_hu),
        });
    }

    let noise = Normal::new(0.0, spec.noise_hu.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Generation(format!("noise distribution: {e}")))?;
    let edge = spec.edge_mm;
    let mut data = Vec::with_capacity(w * h * d);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = mm([x as f64, y as f64, z as f64]);
                let rho = lung_rho(x as f64, y as f64);
                let lung = soft((rho - 1.0) * lung_axes[0].min(lung_axes[1]) * sp[0].min(sp[1]), edge * 4.0);
                let mut v = background + lung * (parenchyma - background);
                for t in &tubes {
                    let rel = [p[0] - t.point[0], p[1] - t.point[1], p[2] - t.point[2]];
                    let along = rel[0] * t.dir[0] + rel[1] * t.dir[1] + rel[2] * t.dir[2];
                    let perp2 = rel.iter().map(|r| r * r).sum::<f64>() - along * along;
                    let wgt = soft(perp2.max(0.0).sqrt() - t.radius, edge) * lung;
                    v += wgt * (t.hu - v);
                }
                for b in &blobs {
                    let c = mm(b.center);
                    let q = (0..3).map(|a| ((p[a] - c[a]) / b.semi_axes[a]).powi(2)).sum::<f64>().sqrt();
                    let wgt = soft((q - 1.0) * b.radius, edge);
                    v += wgt * (b.hu - v);
                }
                let n = if spec.noise_hu > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.push((v + n).round().clamp(-1024.0, 3071.0));
            }
        }
    }
    let origin = [-ext[0] / 2.0, -ext[1] / 2.0, 0.0];
    Ok(Phantom {
        volume: Tensor::new(vec![d, h, w], data)?,
        meta: VolumeMeta {
            dims: spec.dims,
            spacing: spec.spacing,
            origin,
            element_type: ElementType::Short,
        },
        nodules,
    })
}

/// Mean intensity of the shell between 1.5 and 2.5 radii around a nodule center.
pub fn local_background_mean(phantom: &Phantom, nodule: &VoxelNodule) -> f64 {
    let sp = phantom.meta.spacing;
    let [w, h, d] = phantom.meta.dims;
    let r = nodule.diameter_mm / 2.0;
    let reach = [0, 1, 2].map(|a| (2.5 * r / sp[a]).ceil() as isize);
    let c = nodule.center.map(|v| v as isize);
    let (mut sum, mut n) = (0.0, 0usize);
    for z in c[2] - reach[2]..=c[2] + reach[2] {
        for y in c[1] - reach[1]..=c[1] + reach[1] {
            for x in c[0] - reach[0]..=c[0] + reach[0] {
                if x < 0 || y < 0 || z < 0 || x >= w as isize || y >= h as isize || z >= d as isize {
                    continue;
                }
                let dist = (((x - c[0]) as f64 * sp[0]).powi(2)
                    + ((y - c[1]) as f64 * sp[1]).powi(2)
                    + ((z - c[2]) as f64 * sp[2]).powi(2))
                .sqrt();
                if dist >= 1.5 * r && dist <= 2.5 * r {
                    sum += phantom.volume.get(&[z as usize, y as usize, x as usize]);
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> PhantomSpec {
        PhantomSpec {
            dims: [64, 64, 8],
            spacing: [1.0, 1.0, 2.5],
            nodule_diameter_mm: [4.0, 12.0],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn same_seed_same_phantom() {
        let spec = PhantomSpec { seed: 7, ..desk() };
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        let other = PhantomSpec { seed: 8, ..desk() };
        assert_ne!(generate_phantom(&spec).unwrap().volume, generate_phantom(&other).unwrap().volume);
    }

    #[test]
    fn zero_nodules_gives_empty_list() {
        let spec = PhantomSpec {
            nodule_count: [0, 0],
            ..desk()
        };
        assert!(generate_phantom(&spec).unwrap().nodules.is_empty());
    }

    #[test]
    fn oversized_diameter_rejected() {
        let spec = PhantomSpec {
            nodule_diameter_mm: [3.0, 40.0],
            ..desk()
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn centers_keep_a_radius_from_the_boundary() {
        for seed in 0..20 {
            let p = generate_phantom(&PhantomSpec { seed, ..desk() }).unwrap();
            for n in &p.nodules {
                for a in 0..3 {
                    let r = n.diameter_mm / 2.0 / p.meta.spacing[a];
                    assert!(n.center[a] >= r && n.center[a] <= (p.meta.dims[a] - 1) as f64 - r + 1.0, "{n:?}");
                    assert_eq!(n.center[a].fract(), 0.0);
                }
            }
        }
    }

    #[test]
    fn spec_text_round_trips() {
        let spec = PhantomSpec { seed: 11, ..desk() };
        assert_eq!(PhantomSpec::parse(&spec.to_text(), "t").unwrap(), spec);
        assert!(PhantomSpec::parse("colour = red\n", "t").is_err());
    }
}
