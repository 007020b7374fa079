//! NIfTI-1 single-file (`.nii`, optionally gzipped) and header/image pair
//! (`.hdr`/`.img`) reading; `.nii` float32 writing.

use std::fs;
#[cfg(feature = "gzip")]
use std::io::Read;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use nalgebra::{Matrix3, Matrix4};

use crate::error::{Error, Result};
use crate::volume::{AffineMap, GridSpec, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

const AFFINE_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    pub big_endian: bool,
}

impl NiftiHeader {
    /// Header for a float32 single-file image with `sform = affine`.
    pub fn for_grid(grid: &GridSpec) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for a in 0..3 {
            dim[a + 1] = grid.dims[a] as i16;
        }
        let vs = grid.voxel_size();
        let mut pixdim = [1.0f32; 8];
        for a in 0..3 {
            pixdim[a + 1] = vs[a] as f32;
        }
        let rows = grid.affine.rows();
        let srow = std::array::from_fn(|r| std::array::from_fn(|c| rows[r][c] as f32));
        Self {
            dim,
            datatype: DT_FLOAT32,
            bitpix: 32,
            pixdim,
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            xyzt_units: 2,
            qform_code: 0,
            sform_code: 2,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow,
            magic: *b"n+1\0",
            big_endian: false,
        }
    }

    pub fn parse(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::format(path, format!("header is {} bytes, need {HEADER_SIZE}", bytes.len())));
        }
        let hdr = if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
            parse_as::<LittleEndian>(bytes, false)
        } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
            parse_as::<BigEndian>(bytes, true)
        } else {
            return Err(Error::format(path, "sizeof_hdr is not 348"));
        };
        if &hdr.magic[..3] != b"n+1" && &hdr.magic[..3] != b"ni1" {
            return Err(Error::format(path, format!("bad magic {:?}", String::from_utf8_lossy(&hdr.magic[..3]))));
        }
        Ok(hdr)
    }

    pub fn is_single_file(&self) -> bool {
        &self.magic[..3] == b"n+1"
    }

    /// Spatial dims; a 4-D image with one volume is squeezed to 3-D.
    pub fn dims3(&self, path: &Path) -> Result<[usize; 3]> {
        let nd = self.dim[0];
        if !(1..=7).contains(&nd) {
            return Err(Error::format(path, format!("dim[0] = {nd}")));
        }
        let nd = nd as usize;
        if nd < 3 || (4..=nd).any(|a| self.dim[a] != 1) {
            let shape: Vec<i16> = self.dim[1..=nd].to_vec();
            return Err(Error::format(path, format!("expected a 3-D image, got shape {shape:?}")));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            if self.dim[a + 1] < 1 {
                return Err(Error::format(path, format!("dim[{}] = {}", a + 1, self.dim[a + 1])));
            }
            dims[a] = self.dim[a + 1] as usize;
        }
        Ok(dims)
    }

    fn unit_scale(&self) -> f64 {
        match self.xyzt_units & 0x07 {
            1 => 1000.0,
            3 => 1e-3,
            _ => 1.0,
        }
    }

    fn sform(&self) -> Option<Matrix4<f64>> {
        if self.sform_code <= 0 {
            return None;
        }
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = self.srow[r][c] as f64;
            }
        }
        Some(m)
    }

    fn qform(&self) -> Option<Matrix4<f64>> {
        if self.qform_code <= 0 {
            return None;
        }
        let [b, c, d] = self.quatern.map(|v| v as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        );
        let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [self.pixdim[1] as f64, self.pixdim[2] as f64, qfac * self.pixdim[3] as f64];
        let mut m = Matrix4::identity();
        for i in 0..3 {
            for j in 0..3 {
                m[(i, j)] = r[(i, j)] * scale[j];
            }
            m[(i, 3)] = self.qoffset[i] as f64;
        }
        Some(m)
    }

    fn pixdim_affine(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            let p = self.pixdim[a + 1] as f64;
            m[(a, a)] = if p > 0.0 { p } else { 1.0 };
        }
        m
    }

    /// Voxel-to-world map: sform if set, else qform, else pixdim scaling.
    pub fn affine(&self, path: &Path) -> Result<AffineMap> {
        let s = self.sform().filter(|m| m.fixed_view::<3, 3>(0, 0).determinant().abs() > 0.0);
        let q = self.qform();
        if let (Some(s), Some(q)) = (&s, &q) {
            if (s - q).amax() > AFFINE_TOL {
                log::warn!("{}: sform and qform disagree, using sform", path.display());
            }
        }
        let mut m = s.or(q).unwrap_or_else(|| self.pixdim_affine());
        let k = self.unit_scale();
        if k != 1.0 {
            for r in 0..3 {
                for c in 0..4 {
                    m[(r, c)] *= k;
                }
            }
        }
        AffineMap::new(m).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        type E = LittleEndian;
        E::write_i32(&mut h[0..4], HEADER_SIZE as i32);
        h[38] = b'r';
        for (i, d) in self.dim.iter().enumerate() {
            E::write_i16(&mut h[40 + 2 * i..], *d);
        }
        E::write_i16(&mut h[70..], self.datatype);
        E::write_i16(&mut h[72..], self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            E::write_f32(&mut h[76 + 4 * i..], *p);
        }
        E::write_f32(&mut h[108..], self.vox_offset);
        E::write_f32(&mut h[112..], self.scl_slope);
        E::write_f32(&mut h[116..], self.scl_inter);
        h[123] = self.xyzt_units;
        E::write_i16(&mut h[252..], self.qform_code);
        E::write_i16(&mut h[254..], self.sform_code);
        for i in 0..3 {
            E::write_f32(&mut h[256 + 4 * i..], self.quatern[i]);
            E::write_f32(&mut h[268 + 4 * i..], self.qoffset[i]);
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                E::write_f32(&mut h[280 + 16 * r + 4 * c..], *v);
            }
        }
        h[344..348].copy_from_slice(&self.magic);
        h
    }
}

fn parse_as<E: ByteOrder>(b: &[u8], big_endian: bool) -> NiftiHeader {
    let f = |o: usize| E::read_f32(&b[o..o + 4]);
    let i16_at = |o: usize| E::read_i16(&b[o..o + 2]);
    NiftiHeader {
        dim: std::array::from_fn(|i| i16_at(40 + 2 * i)),
        datatype: i16_at(70),
        bitpix: i16_at(72),
        pixdim: std::array::from_fn(|i| f(76 + 4 * i)),
        vox_offset: f(108),
        scl_slope: f(112),
        scl_inter: f(116),
        xyzt_units: b[123],
        qform_code: i16_at(252),
        sform_code: i16_at(254),
        quatern: std::array::from_fn(|i| f(256 + 4 * i)),
        qoffset: std::array::from_fn(|i| f(268 + 4 * i)),
        srow: std::array::from_fn(|r| std::array::from_fn(|c| f(280 + 16 * r + 4 * c))),
        magic: [b[344], b[345], b[346], b[347]],
        big_endian,
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !is_gz(path) {
        return Ok(raw);
    }
    #[cfg(feature = "gzip")]
    {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    }
    #[cfg(not(feature = "gzip"))]
    {
        let _ = raw;
        Err(Error::format(path, "gzip support is not enabled (build with the `gzip` feature)"))
    }
}

fn decode<E: ByteOrder>(path: &Path, hdr: &NiftiHeader, bytes: &[u8], n: usize) -> Result<Vec<f32>> {
    let width = match hdr.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    if bytes.len() < n * width {
        return Err(Error::format(path, format!("payload has {} bytes, need {}", bytes.len(), n * width)));
    }
    let b = &bytes[..n * width];
    let raw: Vec<f64> = match hdr.datatype {
        DT_UINT8 => b.iter().map(|&v| v as f64).collect(),
        DT_INT16 => b.chunks_exact(2).map(|c| E::read_i16(c) as f64).collect(),
        DT_INT32 => b.chunks_exact(4).map(|c| E::read_i32(c) as f64).collect(),
        DT_FLOAT32 => b.chunks_exact(4).map(|c| E::read_f32(c) as f64).collect(),
        _ => b.chunks_exact(8).map(|c| E::read_f64(c)).collect(),
    };
    let (slope, inter) = (hdr.scl_slope as f64, hdr.scl_inter as f64);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0) {
        Ok(raw.into_iter().map(|v| (v * slope + inter) as f32).collect())
    } else {
        Ok(raw.into_iter().map(|v| v as f32).collect())
    }
}

pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = read_bytes(path)?;
    let hdr = NiftiHeader::parse(path, &bytes)?;
    let dims = hdr.dims3(path)?;
    let affine = hdr.affine(path)?;
    let grid = GridSpec::new(dims, affine).map_err(|e| Error::format(path, e.to_string()))?;
    let n = grid.len();
    let (payload, data_path): (Vec<u8>, PathBuf) = if hdr.is_single_file() {
        let off = hdr.vox_offset.max(0.0) as usize;
        if off < HEADER_SIZE || off > bytes.len() {
            return Err(Error::format(path, format!("vox_offset {} outside file", hdr.vox_offset)));
        }
        (bytes[off..].to_vec(), path.to_path_buf())
    } else {
        let img = path.with_extension("img");
        let b = fs::read(&img).map_err(|e| Error::io(&img, e))?;
        let off = (hdr.vox_offset.max(0.0) as usize).min(b.len());
        (b[off..].to_vec(), img)
    };
    let data = if hdr.big_endian {
        decode::<BigEndian>(&data_path, &hdr, &payload, n)?
    } else {
        decode::<LittleEndian>(&data_path, &hdr, &payload, n)?
    };
    Volume::new(grid, data)
}

/// Writes a float32 `.nii` (or `.nii.gz` with the `gzip` feature); masked
/// voxels are stored as NaN.
pub fn write_nifti(v: &Volume, path: &Path) -> Result<()> {
    let hdr = NiftiHeader::for_grid(v.grid());
    let mut out = hdr.to_bytes();
    out.reserve(4 * v.len());
    for x in v.data_with_nan() {
        out.write_f32::<LittleEndian>(x).expect("writing to a Vec");
    }
    if is_gz(path) {
        #[cfg(feature = "gzip")]
        {
            let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut enc = flate2::write::GzEncoder::new(f, flate2::Compression::default());
            enc.write_all(&out).and_then(|_| enc.finish().map(|_| ())).map_err(|e| Error::io(path, e))?;
            return Ok(());
        }
        #[cfg(not(feature = "gzip"))]
        return Err(Error::format(path, "gzip support is not enabled (build with the `gzip` feature)"));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
