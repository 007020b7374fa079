//! Volume and report files. The format is chosen by extension: `.nii`
//! (and `.nii.gz` with the `gzip` feature), `.hdr` for header/image pairs,
//! and `.rawvol.json` for the internal format.

pub mod nifti;
pub mod raw;

use std::path::Path;

use crate::error::{Error, Result};
use crate::report::RunReport;
use crate::volume::Volume;

pub use nifti::{read_nifti, write_nifti, NiftiHeader};
pub use raw::{read_raw, write_raw};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Nifti,
    NiftiPair,
    Raw,
}

pub fn format_of(path: &Path) -> Result<Format> {
    if raw::is_raw_path(path) {
        return Ok(Format::Raw);
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_ascii_lowercase();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(Format::Nifti)
    } else if name.ends_with(".hdr") {
        Ok(Format::NiftiPair)
    } else {
        Err(Error::format(path, "unknown extension (expected .nii, .nii.gz, .hdr or .rawvol.json)"))
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match format_of(path)? {
        Format::Nifti | Format::NiftiPair => read_nifti(path),
        Format::Raw => read_raw(path),
    }
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format_of(path)? {
        Format::Nifti => write_nifti(v, path),
        Format::Raw => write_raw(v, path),
        Format::NiftiPair => Err(Error::format(path, "writing .hdr/.img pairs is not supported; use .nii")),
    }
}

pub fn write_report(r: &RunReport, path: impl AsRef<Path>) -> Result<()> {
    r.write(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridSpec;

    #[test]
    fn dispatch() {
        assert_eq!(format_of(Path::new("a/b.nii")).unwrap(), Format::Nifti);
        assert_eq!(format_of(Path::new("b.NII.gz")).unwrap(), Format::Nifti);
        assert_eq!(format_of(Path::new("b.hdr")).unwrap(), Format::NiftiPair);
        assert_eq!(format_of(Path::new("b.rawvol.json")).unwrap(), Format::Raw);
        assert!(format_of(Path::new("b.json")).is_err());
        assert!(format_of(Path::new("b.mgz")).is_err());
    }

    #[test]
    fn both_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridSpec::axis_aligned([4, 3, 2], [1.0, 1.0, 3.0], [-1.0, 0.0, 2.0]).unwrap();
        let v = Volume::new(g, (0..24).map(|i| (i * i) as f32 / 7.0).collect()).unwrap();
        for name in ["x.nii", "x.rawvol.json"] {
            let p = dir.path().join(name);
            write_volume(&v, &p).unwrap();
            assert_eq!(read_volume(&p).unwrap(), v, "{name}");
        }
    }
}
