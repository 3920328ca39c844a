//! Volume files: a JSON header `<name>.json` next to a raw little-endian,
//! x-fastest payload `<name>.raw`.
//!
//! ```json
//! {"dims":[nx,ny,nz],"spacing_mm":[sx,sy,sz],"origin_mm":[ox,oy,oz],"dtype":"f32"}
//! ```
//!
//! `dtype` is one of `f32` (scalar volumes), `u8` (binary masks, 0/1) and
//! `u32` (instance labels).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, LabelVolume, Volume, VolumeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    U32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LoadedVolume {
    Scalar(Volume<f32>),
    Mask(BinaryMask),
    Labels(LabelVolume),
}

impl LoadedVolume {
    pub fn into_scalar(self) -> Option<Volume<f32>> {
        match self {
            LoadedVolume::Scalar(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_mask(self) -> Option<BinaryMask> {
        match self {
            LoadedVolume::Mask(v) => Some(v),
            _ => None,
        }
    }

    pub fn into_labels(self) -> Option<LabelVolume> {
        match self {
            LoadedVolume::Labels(v) => Some(v),
            _ => None,
        }
    }
}

/// Header and payload paths for a volume named by `path`. Accepts the bare
/// stem or either of the two file names.
pub fn volume_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let path = path.as_ref();
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (header.into(), raw.into())
}

pub fn read_header(path: impl AsRef<Path>) -> Result<VolumeHeader> {
    let (header_path, _) = volume_paths(path);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&header_path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<LoadedVolume> {
    let (header_path, raw_path) = volume_paths(&path);
    let header = read_header(&path)?;
    let dtype = match header.dtype.as_str() {
        "f32" => Dtype::F32,
        "u8" => Dtype::U8,
        "u32" => Dtype::U32,
        other => return Err(Error::format(&header_path, format!("unknown dtype {other:?}"))),
    };
    let grid = VolumeGrid::with_origin(header.dims, header.spacing_mm, header.origin_mm)
        .map_err(|e| Error::format(&header_path, e.to_string()))?;
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = grid.len() * dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(
            &raw_path,
            format!("payload is {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    Ok(match dtype {
        Dtype::F32 => {
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let v = Volume::new(grid, data)?;
            v.check_finite().map_err(|e| Error::format(&raw_path, e.to_string()))?;
            LoadedVolume::Scalar(v)
        }
        Dtype::U8 => {
            if let Some(b) = bytes.iter().find(|&&b| b > 1) {
                return Err(Error::format(&raw_path, format!("mask byte {b} is not 0 or 1")));
            }
            LoadedVolume::Mask(Volume::new(grid, bytes.iter().map(|&b| b == 1).collect())?)
        }
        Dtype::U32 => {
            let data = bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
            let labels = LabelVolume::new(Volume::new(grid, data)?).map_err(|e| Error::format(&raw_path, e.to_string()))?;
            LoadedVolume::Labels(labels)
        }
    })
}

fn write_volume(path: &Path, grid: &VolumeGrid, dtype: Dtype, payload: &[u8]) -> Result<()> {
    let (header_path, raw_path) = volume_paths(path);
    let header = VolumeHeader {
        dims: grid.dims(),
        spacing_mm: grid.spacing(),
        origin_mm: grid.origin(),
        dtype: serde_json::to_value(dtype).unwrap().as_str().unwrap().to_string(),
    };
    if let Some(dir) = header_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&header_path, e))?;
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))
}

pub fn save_scalar(v: &Volume<f32>, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_volume(path.as_ref(), v.grid(), Dtype::F32, &payload)
}

pub fn save_mask(v: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = v.data().iter().map(|&b| b as u8).collect();
    write_volume(path.as_ref(), v.grid(), Dtype::U8, &payload)
}

pub fn save_labels(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
    write_volume(path.as_ref(), v.grid(), Dtype::U32, &payload)
}

pub fn save_volume(v: &LoadedVolume, path: impl AsRef<Path>) -> Result<()> {
    match v {
        LoadedVolume::Scalar(v) => save_scalar(v, path),
        LoadedVolume::Mask(v) => save_mask(v, path),
        LoadedVolume::Labels(v) => save_labels(v, path),
    }
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<Volume<f32>> {
    let p = path.as_ref();
    load_volume(p)?.into_scalar().ok_or_else(|| Error::format(p, "expected dtype f32"))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let p = path.as_ref();
    load_volume(p)?.into_mask().ok_or_else(|| Error::format(p, "expected dtype u8"))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let p = path.as_ref();
    load_volume(p)?.into_labels().ok_or_else(|| Error::format(p, "expected dtype u32"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3]) -> VolumeGrid {
        VolumeGrid::new(dims, [1.0, 1.0, 2.5]).unwrap()
    }

    #[test]
    fn eight_voxel_f32_volume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v");
        let v = Volume::from_fn(grid([2, 2, 2]), |x, y, z| (x + 2 * y + 4 * z) as f32);
        save_scalar(&v, &p).unwrap();
        assert_eq!(fs::metadata(dir.path().join("v.raw")).unwrap().len(), 32);
        let back = load_scalar(dir.path().join("v.json")).unwrap();
        assert_eq!(back.len(), 8);
        assert_eq!(back, v);
        assert_eq!(back.grid().spacing(), [1.0, 1.0, 2.5]);
        // x-fastest on disk
        let raw = fs::read(dir.path().join("v.raw")).unwrap();
        assert_eq!(f32::from_le_bytes(raw[4..8].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(raw[8..12].try_into().unwrap()), 2.0);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v");
        save_scalar(&Volume::filled(grid([2, 2, 2]), 1.0f32), &p).unwrap();
        let raw = dir.path().join("v.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..31]).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn zero_volume_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zeros");
        save_scalar(&Volume::filled(grid([4, 4, 4]), 0.0f32), &p).unwrap();
        let raw = fs::read(dir.path().join("zeros.raw")).unwrap();
        assert_eq!(raw.len(), 256);
        assert!(raw.iter().all(|&b| b == 0));
    }

    #[test]
    fn header_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_volume(dir.path().join("missing")), Err(Error::Io { .. })));
        let h = dir.path().join("bad.json");
        fs::write(&h, r#"{"dims":[1,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"f16"}"#).unwrap();
        fs::write(dir.path().join("bad.raw"), [0u8; 2]).unwrap();
        assert!(matches!(load_volume(&h), Err(Error::Format { .. })));
        fs::write(&h, r#"{"dims":[1,1,1],"spacing_mm":[1,0,1],"origin_mm":[0,0,0],"dtype":"u8"}"#).unwrap();
        assert!(matches!(load_volume(&h), Err(Error::Format { .. })));
    }

    #[test]
    fn mask_and_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Volume::from_fn(grid([3, 2, 2]), |x, y, _| x == y);
        save_mask(&m, dir.path().join("m")).unwrap();
        assert_eq!(load_mask(dir.path().join("m")).unwrap(), m);
        let l = LabelVolume::new(Volume::from_fn(grid([3, 2, 2]), |x, _, z| (x * z) as u32 % 3)).unwrap();
        save_labels(&l, dir.path().join("l.raw")).unwrap();
        assert_eq!(load_labels(dir.path().join("l")).unwrap(), l);
        assert!(load_scalar(dir.path().join("l")).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn scalar_round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u32>(), 24),
            ox in -100.0f64..100.0, sz in 0.1f64..5.0,
        ) {
            // any finite bit pattern must survive
            let data: Vec<f32> = bits.iter().map(|&b| {
                let f = f32::from_bits(b);
                if f.is_finite() { f } else { 0.0 }
            }).collect();
            let g = VolumeGrid::with_origin([2, 3, 4], [1.0, 1.0, sz], [ox, -ox, 0.5]).unwrap();
            let v = Volume::new(g, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            save_scalar(&v, dir.path().join("r")).unwrap();
            let back = load_scalar(dir.path().join("r")).unwrap();
            prop_assert_eq!(back.grid(), v.grid());
            for (a, b) in back.data().iter().zip(v.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
