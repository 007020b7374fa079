//! Finite-difference gradients and the smoothness priors built on them.
//!
//! The gradient at a voxel has six components: forward and backward
//! differences along x, y and z, each divided by the voxel size along that
//! axis. Differences that would reach across the volume boundary are zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::sum_f64;
use crate::volume::{GridSpec, Volume};

/// Number of gradient components per voxel.
pub const G: usize = 6;

/// Grid shape and physical spacing used by the difference stencils.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Lattice {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Self { dims, spacing }
    }

    pub fn of(grid: &GridSpec) -> Self {
        Self { dims: grid.dims, spacing: grid.voxel_size() }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn strides(&self) -> [usize; 3] {
        [1, self.dims[0], self.dims[0] * self.dims[1]]
    }

    #[inline]
    fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }
}

/// Six difference images, stored per voxel as
/// `[fwd x, bwd x, fwd y, bwd y, fwd z, bwd z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub lattice: Lattice,
    pub values: Vec<[f32; G]>,
}

impl GradientField {
    pub fn zeros(lattice: Lattice) -> Self {
        Self { lattice, values: vec![[0.0; G]; lattice.len()] }
    }

    pub fn norm_sq(&self) -> f64 {
        sum_f64(self.values.len(), |n| self.values[n].iter().map(|&v| (v as f64).powi(2)).sum())
    }
}

/// Which smoothness prior couples the HR voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    /// First-order Tikhonov: `(λ/2)‖D y‖²` per channel.
    Fot,
    /// Isotropic total variation per channel: `λ Σ_n ‖D_n y‖`.
    Tv,
    /// Multi-channel total variation: `Σ_n sqrt(Σ_c ‖λ_c D_n y_c‖²)`.
    Mtv,
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorKind::Fot => "fot",
            PriorKind::Tv => "tv",
            PriorKind::Mtv => "mtv",
        })
    }
}

/// `D y` into an existing field.
pub fn grad_into(lat: &Lattice, y: &[f32], out: &mut [[f32; G]]) {
    assert_eq!(y.len(), lat.len());
    assert_eq!(out.len(), lat.len());
    let st = lat.strides();
    let inv = lat.spacing.map(|s| (1.0 / s) as f32);
    out.par_iter_mut().enumerate().for_each(|(n, g)| {
        let c = lat.coords(n);
        let v = y[n];
        for a in 0..3 {
            g[2 * a] = if c[a] + 1 < lat.dims[a] { (y[n + st[a]] - v) * inv[a] } else { 0.0 };
            g[2 * a + 1] = if c[a] >= 1 { (v - y[n - st[a]]) * inv[a] } else { 0.0 };
        }
    });
}

pub fn grad_raw(lat: &Lattice, y: &[f32]) -> GradientField {
    let mut f = GradientField::zeros(*lat);
    grad_into(lat, y, &mut f.values);
    f
}

/// Gradient of a volume; masked voxels enter as their stored zero.
pub fn grad(y: &Volume) -> GradientField {
    grad_raw(&Lattice::of(y.grid()), y.data())
}

/// `Dᵀ g` into `out`.
pub fn grad_adjoint_into(lat: &Lattice, g: &[[f32; G]], out: &mut [f32]) {
    assert_eq!(g.len(), lat.len());
    assert_eq!(out.len(), lat.len());
    let st = lat.strides();
    let inv = lat.spacing.map(|s| 1.0 / s);
    out.par_iter_mut().enumerate().for_each(|(n, o)| {
        let c = lat.coords(n);
        let mut acc = 0.0f64;
        for a in 0..3 {
            let (f, b) = (2 * a, 2 * a + 1);
            let mut s = 0.0f64;
            if c[a] >= 1 {
                s += g[n - st[a]][f] as f64 + g[n][b] as f64;
            }
            if c[a] + 1 < lat.dims[a] {
                s -= g[n][f] as f64 + g[n + st[a]][b] as f64;
            }
            acc += s * inv[a];
        }
        *o = acc as f32;
    });
}

pub fn grad_adjoint(g: &GradientField) -> Vec<f32> {
    let mut out = vec![0f32; g.lattice.len()];
    grad_adjoint_into(&g.lattice, &g.values, &mut out);
    out
}

/// `DᵀD y`: twice the graph Laplacian with `1/h²` edge weights.
pub fn apply_dtd(lat: &Lattice, y: &[f32], out: &mut [f32]) {
    let st = lat.strides();
    let w = lat.spacing.map(|s| 2.0 / (s * s));
    out.par_iter_mut().enumerate().for_each(|(n, o)| {
        let c = lat.coords(n);
        let v = y[n] as f64;
        let mut acc = 0.0f64;
        for a in 0..3 {
            if c[a] >= 1 {
                acc += w[a] * (v - y[n - st[a]] as f64);
            }
            if c[a] + 1 < lat.dims[a] {
                acc += w[a] * (v - y[n + st[a]] as f64);
            }
        }
        *o = acc as f32;
    });
}

/// Diagonal of `DᵀD` at each voxel.
pub fn dtd_diagonal(lat: &Lattice, n: usize) -> f64 {
    let c = lat.coords(n);
    let mut d = 0.0;
    for a in 0..3 {
        let nb = (c[a] >= 1) as usize + (c[a] + 1 < lat.dims[a]) as usize;
        d += nb as f64 * 2.0 / (lat.spacing[a] * lat.spacing[a]);
    }
    d
}

fn voxel_norm_sq(g: &[f32; G]) -> f64 {
    g.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

/// `λ Σ_n ‖D_n y‖₂`.
pub fn tv_energy_field(g: &GradientField, lambda: f64) -> f64 {
    lambda * sum_f64(g.values.len(), |n| voxel_norm_sq(&g.values[n]).sqrt())
}

/// `(λ/2) ‖D y‖₂²`.
pub fn fot_energy_field(g: &GradientField, lambda: f64) -> f64 {
    0.5 * lambda * g.norm_sq()
}

/// `Σ_n sqrt(Σ_c λ_c² ‖D_n y_c‖²)`.
pub fn mtv_energy_fields(gs: &[GradientField], lambdas: &[f64]) -> Result<f64> {
    let first = gs.first().ok_or(Error::EmptyInput("channel list"))?;
    if gs.len() != lambdas.len() {
        return Err(Error::InvalidParameter(format!(
            "{} channels but {} regularization weights",
            gs.len(),
            lambdas.len()
        )));
    }
    if gs.iter().any(|g| g.lattice.dims != first.lattice.dims) {
        return Err(Error::DimensionMismatch {
            expected: first.lattice.dims,
            got: gs.iter().find(|g| g.lattice.dims != first.lattice.dims).unwrap().lattice.dims,
        });
    }
    let l2: Vec<f64> = lambdas.iter().map(|l| l * l).collect();
    Ok(sum_f64(first.values.len(), |n| {
        gs.iter().zip(&l2).map(|(g, l)| l * voxel_norm_sq(&g.values[n])).sum::<f64>().sqrt()
    }))
}

pub fn tv_energy(y: &Volume, lambda: f64) -> f64 {
    tv_energy_field(&grad(y), lambda)
}

pub fn fot_energy(y: &Volume, lambda: f64) -> f64 {
    fot_energy_field(&grad(y), lambda)
}

pub fn mtv_energy(ys: &[Volume], lambdas: &[f64]) -> Result<f64> {
    if let Some(first) = ys.first() {
        if let Some(bad) = ys.iter().find(|v| v.dims() != first.dims()) {
            return Err(Error::DimensionMismatch { expected: first.dims(), got: bad.dims() });
        }
    }
    let gs: Vec<GradientField> = ys.iter().map(grad).collect();
    mtv_energy_fields(&gs, lambdas)
}

/// Prior energy for a set of channel gradient fields.
pub fn prior_energy(kind: PriorKind, gs: &[GradientField], lambdas: &[f64]) -> Result<f64> {
    match kind {
        PriorKind::Mtv => mtv_energy_fields(gs, lambdas),
        PriorKind::Tv => Ok(gs.iter().zip(lambdas).map(|(g, &l)| tv_energy_field(g, l)).sum()),
        PriorKind::Fot => Ok(gs.iter().zip(lambdas).map(|(g, &l)| fot_energy_field(g, l)).sum()),
    }
}
