//! MetaImage (`.mhd` header + raw payload) reading and writing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    /// Signed 16-bit integers.
    Short,
    /// 32-bit IEEE floats.
    Float,
}

impl ElementType {
    pub fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
        }
    }
}

/// Geometry of a scan. Triples are `(x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    /// Millimetres per voxel.
    pub spacing: [f64; 3],
    /// World position of voxel `(0, 0, 0)` in millimetres.
    pub origin: [f64; 3],
    pub element_type: ElementType,
}

impl VolumeMeta {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Validation(format!("volume dims {:?} must be >= 1", self.dims)));
        }
        if !self.spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
            return Err(Error::Validation(format!("spacing {:?} must be positive", self.spacing)));
        }
        Ok(())
    }

    /// Continuous voxel coordinates of a world position.
    pub fn world_to_voxel(&self, world: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (world[a] - self.origin[a]) / self.spacing[a])
    }

    pub fn voxel_to_world(&self, voxel: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + voxel[a] * self.spacing[a])
    }

    /// Tensor shape `(D, H, W)`.
    pub fn shape(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }
}

fn header_error(path: &Path, key: &str, message: impl Into<String>) -> Error {
    Error::parse(path.display().to_string(), None, format!("{key}: {}", message.into()))
}

fn floats<const N: usize>(path: &Path, key: &str, v: &str) -> Result<[f64; N]> {
    let parsed: Vec<f64> = v
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| header_error(path, key, format!("expected {N} numbers, got {v:?}")))?;
    parsed
        .try_into()
        .map_err(|_| header_error(path, key, format!("expected {N} numbers, got {v:?}")))
}

/// Reads a volume in Hounsfield units as a `(D, H, W)` tensor.
pub fn read_metaimage(header_path: &Path) -> Result<(Tensor<f64>, VolumeMeta)> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let mut keys: HashMap<String, String> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::parse(header_path.display().to_string(), Some(i + 1), "expected `Key = Value`")
        })?;
        keys.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |key: &str| keys.get(key).map(String::as_str).ok_or_else(|| header_error(header_path, key, "missing key"));

    let object = get("ObjectType")?;
    if !object.eq_ignore_ascii_case("image") {
        return Err(header_error(header_path, "ObjectType", format!("expected Image, got {object}")));
    }
    if get("NDims")? != "3" {
        return Err(header_error(header_path, "NDims", "only 3-dimensional images are supported"));
    }
    let dims_f: [f64; 3] = floats(header_path, "DimSize", get("DimSize")?)?;
    let dims = dims_f.map(|d| d as usize);
    if dims_f.iter().any(|&d| d < 1.0 || d.fract() != 0.0) {
        return Err(header_error(header_path, "DimSize", "extents must be positive integers"));
    }
    let spacing_key = if keys.contains_key("ElementSpacing") { "ElementSpacing" } else { "ElementSize" };
    let spacing = floats(header_path, spacing_key, get(spacing_key).map_err(|_| header_error(header_path, "ElementSpacing", "missing key"))?)?;
    let origin_key = ["Offset", "Origin", "Position"]
        .into_iter()
        .find(|k| keys.contains_key(*k))
        .ok_or_else(|| header_error(header_path, "Offset", "missing key"))?;
    let origin = floats(header_path, origin_key, get(origin_key)?)?;
    if let Some(m) = keys.get("TransformMatrix") {
        let tm: [f64; 9] = floats(header_path, "TransformMatrix", m)?;
        if tm != [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] {
            return Err(header_error(header_path, "TransformMatrix", "only the identity orientation is supported"));
        }
    }
    for key in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB"] {
        if keys.get(key).is_some_and(|v| v.eq_ignore_ascii_case("true")) {
            return Err(header_error(header_path, key, "big-endian payloads are not supported"));
        }
    }
    if keys.get("CompressedData").is_some_and(|v| v.eq_ignore_ascii_case("true")) {
        return Err(header_error(header_path, "CompressedData", "compressed payloads are not supported"));
    }
    let element_type = match get("ElementType")? {
        "MET_SHORT" => ElementType::Short,
        "MET_FLOAT" => ElementType::Float,
        other => {
            return Err(header_error(
                header_path,
                "ElementType",
                format!("unsupported {other}, expected MET_SHORT or MET_FLOAT"),
            ))
        }
    };
    let data_file = get("ElementDataFile")?;
    if data_file.eq_ignore_ascii_case("LOCAL") || data_file.starts_with("LIST") {
        return Err(header_error(header_path, "ElementDataFile", "only a separate raw file is supported"));
    }
    let meta = VolumeMeta {
        dims,
        spacing,
        origin,
        element_type,
    };
    meta.validate()?;

    let raw_path = header_path.parent().unwrap_or(Path::new(".")).join(data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let count: usize = dims.iter().product();
    let expected = count * element_type.size();
    if bytes.len() != expected {
        return Err(header_error(
            header_path,
            "ElementDataFile",
            format!(
                "{} holds {} bytes but DimSize {:?} of {} needs {expected}",
                raw_path.display(),
                bytes.len(),
                dims,
                element_type.tag()
            ),
        ));
    }
    let data: Vec<f64> = match element_type {
        ElementType::Short => bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        ElementType::Float => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Ok((Tensor::new(meta.shape().to_vec(), data)?, meta))
}

/// Writes `<stem>.mhd` and `<stem>.raw`. Values must be representable in the
/// element type exactly (integers within `i16` range for `MET_SHORT`).
pub fn write_metaimage(header_path: &Path, volume: &Tensor<f64>, meta: &VolumeMeta) -> Result<PathBuf> {
    meta.validate()?;
    if volume.shape() != meta.shape() {
        return Err(Error::Validation(format!(
            "volume shape {:?} disagrees with header dims {:?}",
            volume.shape(),
            meta.dims
        )));
    }
    let mut payload = Vec::with_capacity(volume.len() * meta.element_type.size());
    for &v in volume.data() {
        match meta.element_type {
            ElementType::Short => {
                if v.fract() != 0.0 || v < i16::MIN as f64 || v > i16::MAX as f64 {
                    return Err(Error::Validation(format!("{v} is not representable as MET_SHORT")));
                }
                payload.extend_from_slice(&(v as i16).to_le_bytes());
            }
            ElementType::Float => payload.extend_from_slice(&(v as f32).to_le_bytes()),
        }
    }
    let raw_path = header_path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Validation(format!("bad output path {}", header_path.display())))?
        .to_string();
    let fmt3 = |v: [f64; 3]| format!("{:?} {:?} {:?}", v[0], v[1], v[2]);
    let mut header = String::new();
    let _ = writeln!(header, "ObjectType = Image");
    let _ = writeln!(header, "NDims = 3");
    let _ = writeln!(header, "BinaryData = True");
    let _ = writeln!(header, "BinaryDataByteOrderMSB = False");
    let _ = writeln!(header, "CompressedData = False");
    let _ = writeln!(header, "TransformMatrix = 1 0 0 0 1 0 0 0 1");
    let _ = writeln!(header, "Offset = {}", fmt3(meta.origin));
    let _ = writeln!(header, "ElementSpacing = {}", fmt3(meta.spacing));
    let _ = writeln!(header, "DimSize = {} {} {}", meta.dims[0], meta.dims[1], meta.dims[2]);
    let _ = writeln!(header, "ElementType = {}", meta.element_type.tag());
    let _ = writeln!(header, "ElementDataFile = {raw_name}");
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    fs::write(header_path, header).map_err(|e| Error::io(header_path, e))?;
    Ok(raw_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(t: ElementType) -> VolumeMeta {
        VolumeMeta {
            dims: [4, 4, 2],
            spacing: [0.7, 0.7, 1.25],
            origin: [-200.0, -200.0, -100.0],
            element_type: t,
        }
    }

    #[test]
    fn short_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scan.mhd");
        let vol = Tensor::from_fn(vec![2, 4, 4], |i| i as f64 * 37.0 - 1000.0);
        write_metaimage(&path, &vol, &meta(ElementType::Short)).unwrap();
        assert_eq!(fs::metadata(dir.path().join("scan.raw")).unwrap().len(), 64);
        let (back, m) = read_metaimage(&path).unwrap();
        assert_eq!(back, vol);
        assert_eq!(m, meta(ElementType::Short));
    }

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.mhd");
        let vol = Tensor::from_fn(vec![2, 4, 4], |i| (i as f32 * 0.1) as f64);
        write_metaimage(&path, &vol, &meta(ElementType::Float)).unwrap();
        assert_eq!(read_metaimage(&path).unwrap().0, vol);
    }

    #[test]
    fn short_payload_is_size_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.mhd");
        write_metaimage(&path, &Tensor::zeros(vec![2, 4, 4]), &meta(ElementType::Short)).unwrap();
        fs::write(dir.path().join("s.raw"), [0u8; 30]).unwrap();
        let err = read_metaimage(&path).unwrap_err().to_string();
        assert!(err.contains("ElementDataFile") && err.contains("30 bytes"), "{err}");
    }

    #[test]
    fn missing_key_and_bad_type_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.mhd");
        fs::write(&path, "ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\nElementSpacing = 1 1 1\nOffset = 0 0 0\nElementType = MET_UCHAR\nElementDataFile = h.raw\n").unwrap();
        assert!(read_metaimage(&path).unwrap_err().to_string().contains("MET_UCHAR"));
        fs::write(&path, "ObjectType = Image\nNDims = 3\nDimSize = 1 1 1\nElementType = MET_SHORT\nElementDataFile = h.raw\n").unwrap();
        assert!(read_metaimage(&path).unwrap_err().to_string().contains("ElementSpacing"));
    }

    #[test]
    fn origin_maps_to_voxel_zero() {
        let m = meta(ElementType::Short);
        assert_eq!(m.world_to_voxel([-200.0, -200.0, -100.0]), [0.0, 0.0, 0.0]);
        assert_eq!(m.voxel_to_world([0.0, 0.0, 0.0]), [-200.0, -200.0, -100.0]);
    }
}
