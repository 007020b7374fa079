//! Projection from a high-resolution grid onto a thick-sliced observation.
//!
//! The operator is the composition `A = R·S·T`:
//!
//! * `T` resamples the HR image (trilinear) onto an intermediate grid that is
//!   aligned with the LR voxel axes, has roughly the HR voxel size, and is
//!   padded along the slice direction by the support radius of the slice
//!   kernel.
//! * `S` convolves the intermediate image along the slice direction with the
//!   slice profile (valid part only, which drops the padding again).
//! * `R` averages the intermediate samples that fall inside each LR voxel.
//!
//! Every stage is stored in gather form for both the forward and the adjoint
//! direction, so each output element is written by exactly one task.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{AffineMap, GridSpec, Volume};

/// Default slice gap as a fraction of the slice thickness.
pub const DEFAULT_GAP_RATIO: f64 = 1.0 / 3.0;

/// Truncation radius of the Gaussian slice profile, in standard deviations.
const GAUSSIAN_TRUNCATION: f64 = 4.0;

/// FWHM = `FWHM_PER_SIGMA` · σ.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3; // 2·sqrt(2·ln 2)

/// Shape of the through-plane slice profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Gaussian,
    /// Box of width FWHM.
    Box,
    /// User kernel sampled at the intermediate slice spacing. Odd length,
    /// centered; normalized to unit sum on use.
    Kernel(Vec<f64>),
}

/// Slice gap, either absolute or relative to the slice thickness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gap {
    Ratio(f64),
    Mm(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceProfile {
    pub kind: ProfileKind,
    pub gap: Gap,
    /// Explicit slice-direction FWHM (mm); overrides `thickness - gap`.
    pub fwhm_mm: Option<f64>,
}

impl Default for SliceProfile {
    fn default() -> Self {
        Self::gaussian()
    }
}

impl SliceProfile {
    pub fn gaussian() -> Self {
        Self { kind: ProfileKind::Gaussian, gap: Gap::Ratio(DEFAULT_GAP_RATIO), fwhm_mm: None }
    }

    pub fn with_gap(mut self, gap: Gap) -> Self {
        self.gap = gap;
        self
    }

    pub fn with_kind(mut self, kind: ProfileKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_fwhm(mut self, fwhm_mm: f64) -> Self {
        self.fwhm_mm = Some(fwhm_mm);
        self
    }

    /// No through-plane blur.
    pub fn none() -> Self {
        Self::gaussian().with_fwhm(0.0).with_gap(Gap::Mm(0.0))
    }

    pub fn gap_mm(&self, thickness: f64) -> f64 {
        match self.gap {
            Gap::Ratio(r) => r * thickness,
            Gap::Mm(g) => g,
        }
    }

    /// Slice-direction FWHM for a slice of the given thickness.
    pub fn slice_fwhm(&self, thickness: f64) -> Result<f64> {
        let gap = self.gap_mm(thickness);
        if !(gap >= 0.0) || gap >= thickness {
            return Err(Error::InvalidParameter(format!(
                "slice gap {gap} mm must lie in [0, thickness = {thickness} mm)"
            )));
        }
        let fwhm = self.fwhm_mm.unwrap_or(thickness - gap);
        if !(fwhm >= 0.0) || !fwhm.is_finite() {
            return Err(Error::InvalidParameter(format!("FWHM must be >= 0, got {fwhm}")));
        }
        Ok(fwhm)
    }

    /// FWHM per LR axis: zero in-plane, `slice_fwhm` along the slice axis.
    pub fn fwhm_per_axis(&self, lr: &GridSpec) -> Result<[f64; 3]> {
        let axis = slice_axis(lr);
        let mut out = [0.0; 3];
        out[axis] = self.slice_fwhm(lr.voxel_size()[axis])?;
        Ok(out)
    }

    /// Discrete kernel at sample spacing `spacing_mm`; odd length, unit sum.
    pub fn kernel(&self, thickness: f64, spacing_mm: f64) -> Result<Vec<f64>> {
        let fwhm = self.slice_fwhm(thickness)?;
        let mut k = match &self.kind {
            ProfileKind::Gaussian => {
                let sigma = fwhm / FWHM_PER_SIGMA / spacing_mm;
                if sigma < 1e-6 {
                    vec![1.0]
                } else {
                    let radius = (GAUSSIAN_TRUNCATION * sigma).ceil() as i64;
                    (-radius..=radius)
                        .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp())
                        .collect()
                }
            }
            ProfileKind::Box => {
                let half = (fwhm / (2.0 * spacing_mm)).round() as usize;
                vec![1.0; 2 * half + 1]
            }
            ProfileKind::Kernel(w) => {
                if w.is_empty() || w.len() % 2 == 0 {
                    return Err(Error::InvalidParameter(
                        "user slice kernel must have odd, nonzero length".into(),
                    ));
                }
                if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::InvalidParameter(
                        "user slice kernel must be finite and nonnegative".into(),
                    ));
                }
                w.clone()
            }
        };
        let s: f64 = k.iter().sum();
        if !(s > 0.0) {
            return Err(Error::InvalidParameter("slice kernel sums to zero".into()));
        }
        k.iter_mut().for_each(|v| *v /= s);
        Ok(k)
    }
}

/// The LR axis with the largest voxel size; ties prefer z, then y.
pub fn slice_axis(lr: &GridSpec) -> usize {
    let vs = lr.voxel_size();
    let mut best = 2;
    for a in [1, 0] {
        if vs[a] > vs[best] * (1.0 + 1e-9) {
            best = a;
        }
    }
    best
}

/// Compressed sparse rows with f32 weights.
#[derive(Clone, Debug)]
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f32>,
    ncols: usize,
}

impl Csr {
    fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn gather(&self, x: &[f32], out: &mut [f32]) {
        out.par_iter_mut().enumerate().for_each(|(r, o)| {
            let mut acc = 0.0f64;
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[e] as f64 * x[self.cols[e] as usize] as f64;
            }
            *o = acc as f32;
        });
    }

    fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.ncols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut cols = vec![0u32; self.cols.len()];
        let mut vals = vec![0f32; self.vals.len()];
        for r in 0..self.nrows() {
            for e in self.row_ptr[r]..self.row_ptr[r + 1] {
                let c = self.cols[e] as usize;
                cols[next[c]] = r as u32;
                vals[next[c]] = self.vals[e];
                next[c] += 1;
            }
        }
        Csr { row_ptr, cols, vals, ncols: self.nrows() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorMode {
    Project,
    Identity,
}

#[derive(Clone, Debug)]
struct Stages {
    intermediate: GridSpec,
    slice_axis: usize,
    /// Intermediate samples per LR voxel along each LR axis.
    sub: [usize; 3],
    /// Slice-profile taps; the intermediate grid is padded by half the length on each side.
    kernel: Vec<f32>,
    t_fwd: Csr,
    t_adj: Csr,
}

/// The linear map from an HR grid onto one LR observation grid.
#[derive(Clone, Debug)]
pub struct ProjectionOperator {
    hr: GridSpec,
    lr: GridSpec,
    profile: SliceProfile,
    mode: OperatorMode,
    stages: Option<Stages>,
}

impl ProjectionOperator {
    pub fn build(hr: GridSpec, lr: GridSpec, profile: SliceProfile) -> Result<Self> {
        let hr_size = hr.voxel_size();
        let h = (hr_size[0] + hr_size[1] + hr_size[2]) / 3.0;
        let lr_size = lr.voxel_size();
        let axis = slice_axis(&lr);

        let sub = [0, 1, 2].map(|a| ((lr_size[a] / h).round() as usize).max(1));
        let spacing = lr_size[axis] / sub[axis] as f64;
        let kernel64 = profile.kernel(lr_size[axis], spacing)?;
        let pad = kernel64.len() / 2;
        let kernel: Vec<f32> = kernel64.iter().map(|&v| v as f32).collect();

        let mut idims = [0; 3];
        for a in 0..3 {
            idims[a] = lr.dims[a] * sub[a] + if a == axis { 2 * pad } else { 0 };
        }
        // Intermediate index p -> LR continuous index q = (p - off + 0.5)/m - 0.5.
        let mut sample_to_lr = nalgebra::Matrix4::identity();
        for a in 0..3 {
            let off = if a == axis { pad as f64 } else { 0.0 };
            sample_to_lr[(a, a)] = 1.0 / sub[a] as f64;
            sample_to_lr[(a, 3)] = (0.5 - off) / sub[a] as f64 - 0.5;
        }
        let int_affine = lr.affine.compose(&AffineMap::new(sample_to_lr)?);
        let intermediate = GridSpec::new(idims, int_affine)?;

        let to_hr = hr.affine.inverse().compose(&int_affine);
        let t_fwd = build_trilinear(&intermediate, &hr, &to_hr);
        let t_adj = t_fwd.transpose();

        Ok(Self {
            hr,
            lr,
            profile,
            mode: OperatorMode::Project,
            stages: Some(Stages { intermediate, slice_axis: axis, sub, kernel, t_fwd, t_adj }),
        })
    }

    /// Identity map on a single grid (denoising).
    pub fn identity(grid: GridSpec) -> Self {
        Self {
            hr: grid,
            lr: grid,
            profile: SliceProfile::none(),
            mode: OperatorMode::Identity,
            stages: None,
        }
    }

    /// Identity operator between grids that must coincide.
    pub fn identity_between(hr: GridSpec, lr: GridSpec) -> Result<Self> {
        if !hr.same_geometry(&lr, 1e-6) {
            return Err(Error::InvalidGeometry(
                "identity projection requires identical HR and LR grids".into(),
            ));
        }
        Ok(Self::identity(hr))
    }

    pub fn hr_grid(&self) -> &GridSpec {
        &self.hr
    }

    pub fn lr_grid(&self) -> &GridSpec {
        &self.lr
    }

    pub fn profile(&self) -> &SliceProfile {
        &self.profile
    }

    pub fn mode(&self) -> OperatorMode {
        self.mode
    }

    pub fn intermediate_grid(&self) -> Option<&GridSpec> {
        self.stages.as_ref().map(|s| &s.intermediate)
    }

    pub fn slice_axis(&self) -> Option<usize> {
        self.stages.as_ref().map(|s| s.slice_axis)
    }

    /// Normalized slice kernel (a single 1 in identity mode).
    pub fn kernel(&self) -> &[f32] {
        match &self.stages {
            Some(s) => &s.kernel,
            None => &[1.0],
        }
    }

    /// `A y` on raw buffers (`y`: HR length, `out`: LR length).
    pub fn apply_raw(&self, y: &[f32], out: &mut [f32]) {
        assert_eq!(y.len(), self.hr.len());
        assert_eq!(out.len(), self.lr.len());
        let Some(st) = &self.stages else {
            out.copy_from_slice(y);
            return;
        };
        let mut t = vec![0f32; st.t_fwd.nrows()];
        st.t_fwd.gather(y, &mut t);

        let sdims = self.sub_dims(st);
        let mut s = vec![0f32; sdims.iter().product()];
        convolve_valid(&t, &st.intermediate.dims, &mut s, &sdims, st.slice_axis, &st.kernel);

        let ldims = self.lr.dims;
        let sub = st.sub;
        let scale = 1.0 / (sub[0] * sub[1] * sub[2]) as f64;
        out.par_iter_mut().enumerate().for_each(|(idx, o)| {
            let [i, j, k] = unravel(idx, ldims);
            let mut acc = 0.0f64;
            for c in 0..sub[2] {
                for b in 0..sub[1] {
                    let row = (j * sub[1] + b) * sdims[0] + (k * sub[2] + c) * sdims[0] * sdims[1];
                    for a in 0..sub[0] {
                        acc += s[row + i * sub[0] + a] as f64;
                    }
                }
            }
            *o = (acc * scale) as f32;
        });
    }

    /// `Aᵀ x` on raw buffers; entries with `mask == true` count as zero.
    pub fn adjoint_raw(&self, x: &[f32], mask: Option<&[bool]>, out: &mut [f32]) {
        assert_eq!(x.len(), self.lr.len());
        assert_eq!(out.len(), self.hr.len());
        let masked = |i: usize| mask.is_some_and(|m| m[i]);
        let Some(st) = &self.stages else {
            out.par_iter_mut().enumerate().for_each(|(i, o)| *o = if masked(i) { 0.0 } else { x[i] });
            return;
        };
        let sdims = self.sub_dims(st);
        let ldims = self.lr.dims;
        let sub = st.sub;
        let scale = 1.0 / (sub[0] * sub[1] * sub[2]) as f32;
        let mut s = vec![0f32; sdims.iter().product()];
        s.par_iter_mut().enumerate().for_each(|(idx, o)| {
            let [a, b, c] = unravel(idx, sdims);
            let l = (a / sub[0]) + ldims[0] * ((b / sub[1]) + ldims[1] * (c / sub[2]));
            *o = if masked(l) { 0.0 } else { x[l] * scale };
        });

        let mut t = vec![0f32; st.t_fwd.nrows()];
        convolve_adjoint(&s, &sdims, &mut t, &st.intermediate.dims, st.slice_axis, &st.kernel);
        st.t_adj.gather(&t, out);
    }

    fn sub_dims(&self, st: &Stages) -> [usize; 3] {
        [0, 1, 2].map(|a| self.lr.dims[a] * st.sub[a])
    }

    pub fn apply(&self, y: &Volume) -> Result<Volume> {
        check_dims(&self.hr, y.grid())?;
        let mut out = vec![0f32; self.lr.len()];
        self.apply_raw(y.data(), &mut out);
        Volume::new(self.lr, out)
    }

    pub fn apply_adjoint(&self, x: &Volume) -> Result<Volume> {
        check_dims(&self.lr, x.grid())?;
        let mut out = vec![0f32; self.hr.len()];
        self.adjoint_raw(x.data(), Some(x.mask()), &mut out);
        Volume::new(self.hr, out)
    }

    /// `Aᵀ A 1` restricted to the unmasked LR voxels.
    pub fn diag_ata_ones_masked(&self, mask: Option<&[bool]>) -> Vec<f32> {
        let ones = vec![1f32; self.hr.len()];
        let mut a1 = vec![0f32; self.lr.len()];
        self.apply_raw(&ones, &mut a1);
        let mut out = vec![0f32; self.hr.len()];
        self.adjoint_raw(&a1, mask, &mut out);
        out
    }

    /// `Aᵀ A 1` as an HR volume.
    pub fn diag_ata_ones(&self) -> Volume {
        let d = self.diag_ata_ones_masked(None);
        Volume::new(self.hr, d).expect("finite by construction")
    }
}

fn check_dims(expected: &GridSpec, got: &GridSpec) -> Result<()> {
    if expected.dims != got.dims {
        return Err(Error::DimensionMismatch { expected: expected.dims, got: got.dims });
    }
    Ok(())
}

#[inline]
fn unravel(idx: usize, dims: [usize; 3]) -> [usize; 3] {
    let i = idx % dims[0];
    let r = idx / dims[0];
    [i, r % dims[1], r / dims[1]]
}

fn build_trilinear(samples: &GridSpec, hr: &GridSpec, to_hr: &AffineMap) -> Csr {
    let n = hr.dims;
    let rows: Vec<Vec<(u32, f32)>> = (0..samples.len())
        .into_par_iter()
        .map(|idx| {
            let p = unravel(idx, samples.dims).map(|v| v as f64);
            trilinear_weights(to_hr.apply(p), n)
        })
        .collect();
    let mut row_ptr = Vec::with_capacity(rows.len() + 1);
    row_ptr.push(0);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for r in rows {
        for (c, w) in r {
            cols.push(c);
            vals.push(w);
        }
        row_ptr.push(cols.len());
    }
    Csr { row_ptr, cols, vals, ncols: hr.len() }
}

/// Trilinear weights at continuous HR index `u`. Points inside the HR field
/// of view (within half a voxel of the outermost centers) are clamped to the
/// nearest center; points outside contribute nothing.
pub(crate) fn trilinear_weights(u: [f64; 3], n: [usize; 3]) -> Vec<(u32, f32)> {
    const EPS: f64 = 1e-6;
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let hi = n[a] as f64 - 0.5;
        if u[a] < -0.5 - EPS || u[a] > hi + EPS {
            return Vec::new();
        }
        let c = u[a].clamp(0.0, (n[a] - 1) as f64);
        let f = c.floor();
        let mut i0 = f as usize;
        let mut t = c - f;
        if i0 + 1 >= n[a] {
            // At the last center: fold onto the final interval.
            if n[a] >= 2 {
                i0 = n[a] - 2;
                t = c - i0 as f64;
            } else {
                i0 = 0;
                t = 0.0;
            }
        }
        base[a] = i0;
        frac[a] = t;
    }
    let mut out = Vec::with_capacity(8);
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let hi = corner & (1 << a) != 0;
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
            idx[a] = base[a] + hi as usize;
        }
        if w > 0.0 {
            let lin = idx[0] + n[0] * (idx[1] + n[1] * idx[2]);
            out.push((lin as u32, w as f32));
        }
    }
    out
}

fn stride(dims: &[usize; 3], axis: usize) -> usize {
    match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    }
}

/// `out[p] = Σ_j k[j] · input[p + j·e_axis]`, with `input` longer by
/// `k.len() - 1` along `axis`.
fn convolve_valid(
    input: &[f32],
    in_dims: &[usize; 3],
    out: &mut [f32],
    out_dims: &[usize; 3],
    axis: usize,
    k: &[f32],
) {
    let in_stride = stride(in_dims, axis);
    out.par_iter_mut().enumerate().for_each(|(idx, o)| {
        let c = unravel(idx, *out_dims);
        let base = c[0] + in_dims[0] * (c[1] + in_dims[1] * c[2]);
        let mut acc = 0.0f64;
        for (j, &w) in k.iter().enumerate() {
            acc += w as f64 * input[base + j * in_stride] as f64;
        }
        *o = acc as f32;
    });
}

/// Adjoint of [`convolve_valid`].
fn convolve_adjoint(
    input: &[f32],
    in_dims: &[usize; 3],
    out: &mut [f32],
    out_dims: &[usize; 3],
    axis: usize,
    k: &[f32],
) {
    let len = in_dims[axis];
    let in_stride = stride(in_dims, axis);
    out.par_iter_mut().enumerate().for_each(|(idx, o)| {
        let mut c = unravel(idx, *out_dims);
        let q = c[axis];
        c[axis] = 0;
        let base = c[0] + in_dims[0] * (c[1] + in_dims[1] * c[2]);
        let mut acc = 0.0f64;
        for (j, &w) in k.iter().enumerate() {
            if q >= j && q - j < len {
                acc += w as f64 * input[base + (q - j) * in_stride] as f64;
            }
        }
        *o = acc as f32;
    });
}
