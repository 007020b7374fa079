//! Internal volume format: a JSON sidecar (`name.rawvol.json`) describing
//! geometry and mask, next to little-endian float32 samples (`name.raw`).

use std::fs;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AffineMap, GridSpec, Volume};

pub const SIDECAR_SUFFIX: &str = ".rawvol.json";
const DTYPE: &str = "float32le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub dims: [usize; 3],
    /// Row-major voxel-to-world matrix.
    pub affine: [[f64; 4]; 4],
    pub dtype: String,
    /// Sample file, relative to the sidecar's directory.
    pub data_file: String,
    /// Masked voxels as `[start, length]` runs in storage order.
    pub mask_runs: Vec<[usize; 2]>,
}

pub fn is_raw_path(path: &Path) -> bool {
    path.to_str().is_some_and(|s| s.ends_with(SIDECAR_SUFFIX))
}

fn data_path(sidecar: &Path) -> Result<PathBuf> {
    let s = sidecar.to_str().filter(|s| s.ends_with(SIDECAR_SUFFIX));
    let s = s.ok_or_else(|| Error::format(sidecar, format!("expected a {SIDECAR_SUFFIX} path")))?;
    Ok(PathBuf::from(format!("{}.raw", &s[..s.len() - SIDECAR_SUFFIX.len()])))
}

pub fn mask_runs(mask: &[bool]) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            runs.push([start, i - start]);
        } else {
            i += 1;
        }
    }
    runs
}

pub fn write_raw(v: &Volume, path: &Path) -> Result<()> {
    let data = data_path(path)?;
    let name = data.file_name().and_then(|n| n.to_str()).expect("built from a utf-8 path").to_string();
    let side = RawSidecar {
        dims: v.dims(),
        affine: v.affine().rows(),
        dtype: DTYPE.into(),
        data_file: name,
        mask_runs: mask_runs(v.mask()),
    };
    let mut bytes = vec![0u8; 4 * v.len()];
    LittleEndian::write_f32_into(v.data(), &mut bytes);
    fs::write(&data, bytes).map_err(|e| Error::io(&data, e))?;
    let json = serde_json::to_string_pretty(&side)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_raw(path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let side: RawSidecar = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if side.dtype != DTYPE {
        return Err(Error::format(path, format!("unsupported dtype {:?}", side.dtype)));
    }
    let affine = AffineMap::from_rows(side.affine).map_err(|e| Error::format(path, e.to_string()))?;
    let grid = GridSpec::new(side.dims, affine).map_err(|e| Error::format(path, e.to_string()))?;
    let data_file = path.parent().unwrap_or(Path::new("")).join(&side.data_file);
    let bytes = fs::read(&data_file).map_err(|e| Error::io(&data_file, e))?;
    if bytes.len() != 4 * grid.len() {
        return Err(Error::format(&data_file, format!("{} bytes for {} voxels", bytes.len(), grid.len())));
    }
    let mut data = vec![0f32; grid.len()];
    LittleEndian::read_f32_into(&bytes, &mut data);
    let mut mask = vec![false; grid.len()];
    for &[start, len] in &side.mask_runs {
        let end = start.checked_add(len).filter(|&e| e <= mask.len());
        let end = end.ok_or_else(|| Error::format(path, format!("mask run {start}+{len} out of range")))?;
        mask[start..end].iter_mut().for_each(|m| *m = true);
    }
    Volume::with_mask(grid, data, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs() {
        assert_eq!(mask_runs(&[false, true, true, false, true]), vec![[1, 2], [4, 1]]);
        assert!(mask_runs(&[false; 3]).is_empty());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.rawvol.json");
        let g = GridSpec::axis_aligned([3, 2, 2], [1.0, 2.0, 0.5], [4.0, 5.0, 6.0]).unwrap();
        let mut mask = vec![false; 12];
        mask[3] = true;
        mask[4] = true;
        let v = Volume::with_mask(g, (0..12).map(|i| i as f32 - 5.5).collect(), mask).unwrap();
        write_raw(&v, &p).unwrap();
        assert!(dir.path().join("v.raw").exists());
        assert_eq!(read_raw(&p).unwrap(), v);
    }

    #[test]
    fn bad_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.rawvol.json");
        fs::write(&p, "{}").unwrap();
        assert!(matches!(read_raw(&p), Err(Error::Format { .. })));
        let g = GridSpec::axis_aligned([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        write_raw(&Volume::zeros(g), &p).unwrap();
        fs::write(dir.path().join("b.raw"), [0u8; 4]).unwrap();
        assert!(matches!(read_raw(&p), Err(Error::Format { .. })));
    }
}
