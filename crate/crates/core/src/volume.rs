//! 3-D scalar volumes with voxel-to-world geometry and a missing-data mask.
//!
//! Voxel indices are 0-based and the first axis varies fastest in memory
//! (`i + nx * (j + ny * k)`), matching the NIfTI on-disk layout. Voxel
//! centers sit at integer indices, so the field of view of a grid extends
//! half a voxel beyond the outermost centers.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 4x4 voxel-to-world map in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 4]", into = "[[f64; 4]; 4]")]
pub struct AffineMap {
    matrix: Matrix4<f64>,
}

impl AffineMap {
    pub fn new(matrix: Matrix4<f64>) -> Result<Self> {
        let last = matrix.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidGeometry(format!(
                "affine last row must be (0,0,0,1), got {last}"
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("affine has non-finite entries".into()));
        }
        let det = matrix.fixed_view::<3, 3>(0, 0).determinant();
        if det.abs() < 1e-12 {
            return Err(Error::InvalidGeometry(format!("affine is singular (det = {det:e})")));
        }
        Ok(Self { matrix })
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Result<Self> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Matrix4::from_row_slice(&flat))
    }

    pub fn identity() -> Self {
        Self { matrix: Matrix4::identity() }
    }

    /// Axis-aligned scaling with an origin (world position of voxel 0).
    pub fn scaled(voxel_size: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let mut m = Matrix4::identity();
        for a in 0..3 {
            m[(a, a)] = voxel_size[a];
            m[(a, 3)] = origin[a];
        }
        Self::new(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.matrix * Vector4::new(p[0], p[1], p[2], 1.0);
        [v[0], v[1], v[2]]
    }

    pub fn inverse(&self) -> Self {
        // Invertibility is checked on construction.
        let inv = self.matrix.try_inverse().expect("affine verified invertible");
        Self { matrix: inv }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &AffineMap) -> Self {
        Self { matrix: self.matrix * other.matrix }
    }

    /// Voxel edge lengths: norms of the first three columns.
    pub fn voxel_size(&self) -> [f64; 3] {
        let l = self.linear();
        [l.column(0).norm(), l.column(1).norm(), l.column(2).norm()]
    }
}

impl TryFrom<[[f64; 4]; 4]> for AffineMap {
    type Error = Error;

    fn try_from(rows: [[f64; 4]; 4]) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<AffineMap> for [[f64; 4]; 4] {
    fn from(a: AffineMap) -> Self {
        a.rows()
    }
}

/// Axis-aligned box in world coordinates (mm).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl WorldBox {
    pub fn union(&self, other: &WorldBox) -> WorldBox {
        let mut out = *self;
        for a in 0..3 {
            out.min[a] = out.min[a].min(other.min[a]);
            out.max[a] = out.max[a].max(other.max[a]);
        }
        out
    }

    pub fn contains(&self, other: &WorldBox, tol: f64) -> bool {
        (0..3).all(|a| self.min[a] <= other.min[a] + tol && self.max[a] >= other.max[a] - tol)
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }
}

/// Sampling grid: dimensions plus voxel-to-world affine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub affine: AffineMap,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], affine: AffineMap) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGeometry(format!("grid dims must be >= 1, got {dims:?}")));
        }
        Ok(Self { dims, affine })
    }

    /// Axis-aligned grid with the given voxel size and origin (world
    /// position of voxel 0).
    pub fn axis_aligned(dims: [usize; 3], voxel_size: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if voxel_size.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "voxel size must be positive, got {voxel_size:?}"
            )));
        }
        Self::new(dims, AffineMap::scaled(voxel_size, origin)?)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.affine.voxel_size()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// World-space bounding box of the grid's field of view.
    pub fn world_bounds(&self) -> WorldBox {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for corner in 0..8 {
            let p = [0, 1, 2].map(|a| {
                if corner & (1 << a) == 0 {
                    -0.5
                } else {
                    self.dims[a] as f64 - 0.5
                }
            });
            let w = self.affine.apply(p);
            for a in 0..3 {
                min[a] = min[a].min(w[a]);
                max[a] = max[a].max(w[a]);
            }
        }
        WorldBox { min, max }
    }

    /// Same dims and affine up to `tol` per affine element.
    pub fn same_geometry(&self, other: &GridSpec, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .affine
                .matrix()
                .iter()
                .zip(other.affine.matrix().iter())
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// A 3-D single-precision image with geometry and a missing-data mask.
///
/// Masked voxels store `0.0` in `data`; the mask is the only source of truth
/// for missingness.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: GridSpec,
    data: Vec<f32>,
    mask: Vec<bool>,
}

impl Volume {
    /// Builds a volume; non-finite values become masked.
    pub fn new(grid: GridSpec, data: Vec<f32>) -> Result<Self> {
        let mask = vec![false; data.len()];
        Self::with_mask(grid, data, mask)
    }

    pub fn with_mask(grid: GridSpec, mut data: Vec<f32>, mut mask: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if mask.len() != data.len() {
            return Err(Error::InvalidGeometry(format!(
                "mask length {} does not match data length {}",
                mask.len(),
                data.len()
            )));
        }
        for (v, m) in data.iter_mut().zip(mask.iter_mut()) {
            if !v.is_finite() {
                *m = true;
            }
            if *m {
                *v = 0.0;
            }
        }
        Ok(Self { grid, data, mask })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        let n = grid.len();
        Self { grid, data: vec![0.0; n], mask: vec![false; n] }
    }

    pub fn filled(grid: GridSpec, value: f32) -> Self {
        let n = grid.len();
        Self { grid, data: vec![value; n], mask: vec![false; n] }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn affine(&self) -> &AffineMap {
        &self.grid.affine
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Value at a voxel, `None` if masked.
    pub fn get(&self, i: usize, j: usize, k: usize) -> Option<f32> {
        let idx = self.grid.index(i, j, k);
        (!self.mask[idx]).then(|| self.data[idx])
    }

    /// Data with masked voxels replaced by NaN, as written to disk.
    pub fn data_with_nan(&self) -> Vec<f32> {
        self.data
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { f32::NAN } else { v })
            .collect()
    }

    pub fn into_parts(self) -> (GridSpec, Vec<f32>, Vec<bool>) {
        (self.grid, self.data, self.mask)
    }

    pub fn world_bounds(&self) -> WorldBox {
        self.grid.world_bounds()
    }

    /// Arithmetic mean over unmasked voxels (accumulated in f64).
    pub fn mean_over_observed(&self) -> Result<f64> {
        let (sum, count) = self
            .data
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| !m)
            .fold((0.0f64, 0usize), |(s, c), (&v, _)| (s + v as f64, c + 1));
        if count == 0 {
            return Err(Error::AllMasked);
        }
        Ok(sum / count as f64)
    }

    /// Unmasked values, in memory order.
    pub fn observed_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().zip(&self.mask).filter(|(_, &m)| !m).map(|(&v, _)| v)
    }
}

/// World-space box of a volume's field of view.
pub fn world_bounds(v: &Volume) -> WorldBox {
    v.world_bounds()
}

/// Arithmetic mean over the unmasked voxels of `v`.
pub fn mean_over_observed(v: &Volume) -> Result<f64> {
    v.mean_over_observed()
}

/// Isotropic, world-aligned grid whose field of view covers every input.
pub fn hr_grid_from_observations(obs: &[&GridSpec], voxel_size: f64) -> Result<GridSpec> {
    let first = obs.first().ok_or(Error::EmptyInput("observation list"))?;
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidParameter(format!("voxel size must be > 0, got {voxel_size}")));
    }
    let bounds = obs
        .iter()
        .skip(1)
        .fold(first.world_bounds(), |acc, g| acc.union(&g.world_bounds()));
    let extent = bounds.extent();
    let dims = extent.map(|e| ((e / voxel_size) - 1e-6).ceil().max(1.0) as usize);
    let origin = [0, 1, 2].map(|a| bounds.min[a] + 0.5 * voxel_size);
    GridSpec::axis_aligned(dims, [voxel_size; 3], origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(dims: [usize; 3], vs: [f64; 3]) -> GridSpec {
        GridSpec::axis_aligned(dims, vs, [0.0; 3]).unwrap()
    }

    #[test]
    fn bounds_identity_unit_grid() {
        let g = grid([2, 2, 2], [1.0; 3]);
        let b = g.world_bounds();
        assert_eq!(b.min, [-0.5; 3]);
        assert_eq!(b.max, [1.5; 3]);
    }

    #[test]
    fn bounds_single_voxel_two_mm() {
        let g = grid([1, 1, 1], [2.0; 3]);
        let b = g.world_bounds();
        assert_eq!(b.min, [-1.0; 3]);
        assert_eq!(b.max, [1.0; 3]);
    }

    #[test]
    fn bounds_rotated_about_z_swap_extents() {
        // x' = -y, y' = x
        let rot = AffineMap::from_rows([
            [0.0, -1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let plain = grid([4, 2, 2], [1.0; 3]).world_bounds();
        let rotated = GridSpec::new([4, 2, 2], rot).unwrap().world_bounds();
        // Corners by hand: x in [-0.5, 3.5], y in [-0.5, 1.5].
        assert_eq!(plain.min, [-0.5, -0.5, -0.5]);
        assert_eq!(plain.max, [3.5, 1.5, 1.5]);
        assert_eq!(rotated.min, [-1.5, -0.5, -0.5]);
        assert_eq!(rotated.max, [0.5, 3.5, 1.5]);
        assert_eq!(rotated.extent()[0], plain.extent()[1]);
        assert_eq!(rotated.extent()[1], plain.extent()[0]);
    }

    #[test]
    fn hr_grid_from_single_thick_slice_volume() {
        let lr = grid([8, 8, 4], [1.0, 1.0, 2.0]);
        let hr = hr_grid_from_observations(&[&lr], 1.0).unwrap();
        assert_eq!(hr.dims, [8, 8, 8]);
        assert_eq!(hr.voxel_size(), [1.0; 3]);
        let (a, b) = (hr.world_bounds(), lr.world_bounds());
        for ax in 0..3 {
            assert!((a.min[ax] - b.min[ax]).abs() < 1e-12);
            assert!((a.max[ax] - b.max[ax]).abs() < 1e-12);
        }
    }

    #[test]
    fn hr_grid_identical_inputs_same_as_one() {
        let lr = grid([8, 6, 4], [1.0, 1.0, 2.0]);
        let one = hr_grid_from_observations(&[&lr], 1.0).unwrap();
        let two = hr_grid_from_observations(&[&lr, &lr], 1.0).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn hr_grid_two_offset_volumes() {
        let a = grid([4, 4, 4], [1.0; 3]); // [-0.5, 3.5]^3
        let b = GridSpec::axis_aligned([4, 4, 4], [1.0; 3], [10.0, 0.0, 0.0]).unwrap(); // x in [9.5, 13.5]
        let hr = hr_grid_from_observations(&[&a, &b], 1.0).unwrap();
        // union x: [-0.5, 13.5] -> 14 voxels; y, z: 4 voxels
        assert_eq!(hr.dims, [14, 4, 4]);
        let bb = hr.world_bounds();
        assert!(bb.contains(&a.world_bounds(), 1e-9));
        assert!(bb.contains(&b.world_bounds(), 1e-9));
    }

    #[test]
    fn hr_grid_rejects_empty() {
        assert!(matches!(hr_grid_from_observations(&[], 1.0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mean_over_observed_examples() {
        let g = grid([3, 1, 1], [1.0; 3]);
        let v = Volume::new(g, vec![3.0; 3]).unwrap();
        assert_eq!(v.mean_over_observed().unwrap(), 3.0);

        let v = Volume::new(g, vec![1.0, 2.0, f32::NAN]).unwrap();
        assert_eq!(v.masked_count(), 1);
        assert_eq!(v.mean_over_observed().unwrap(), 1.5);

        let all = Volume::with_mask(g, vec![1.0; 3], vec![true; 3]).unwrap();
        assert!(matches!(all.mean_over_observed(), Err(Error::AllMasked)));
    }

    #[test]
    fn mean_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let g = grid([9, 7, 5], [1.0; 3]);
        let data: Vec<f32> = (0..g.len()).map(|_| rng.random_range(-50.0..150.0)).collect();
        let mut mask = vec![false; g.len()];
        for m in mask.iter_mut() {
            *m = rng.random_bool(0.2);
        }
        let v = Volume::with_mask(g, data.clone(), mask.clone()).unwrap();
        let mut s = 0.0f64;
        let mut c = 0.0f64;
        for i in 0..data.len() {
            if !mask[i] {
                s += data[i] as f64;
                c += 1.0;
            }
        }
        let expected = s / c;
        let got = v.mean_over_observed().unwrap();
        assert!(((got - expected) / expected).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = grid([2, 2, 2], [1.0; 3]);
        assert!(Volume::new(g, vec![0.0; 7]).is_err());
        assert!(GridSpec::new([0, 2, 2], AffineMap::identity()).is_err());
        assert!(AffineMap::from_rows([
            [1.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
        .is_err());
    }

    proptest! {
        // Permuting voxel axes while permuting the affine columns to match
        // leaves the field of view unchanged.
        #[test]
        fn bounds_invariant_under_axis_relabeling(
            dims in prop::array::uniform3(1usize..12),
            vs in prop::array::uniform3(0.5f64..4.0),
            origin in prop::array::uniform3(-20.0f64..20.0),
            perm_idx in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let p = perms[perm_idx];
            let g = GridSpec::axis_aligned(dims, vs, origin).unwrap();
            let m = g.affine.matrix();
            let mut pm = Matrix4::identity();
            for (new_axis, &old_axis) in p.iter().enumerate() {
                for r in 0..3 {
                    pm[(r, new_axis)] = m[(r, old_axis)];
                }
            }
            for r in 0..3 {
                pm[(r, 3)] = m[(r, 3)];
            }
            let relabeled = GridSpec::new(p.map(|a| dims[a]), AffineMap::new(pm).unwrap()).unwrap();
            let (a, b) = (g.world_bounds(), relabeled.world_bounds());
            for ax in 0..3 {
                prop_assert!((a.min[ax] - b.min[ax]).abs() < 1e-9);
                prop_assert!((a.max[ax] - b.max[ax]).abs() < 1e-9);
            }
        }

        #[test]
        fn hr_grid_contains_all_inputs(
            grids in prop::collection::vec(
                (prop::array::uniform3(1usize..10), prop::array::uniform3(0.5f64..5.0),
                 prop::array::uniform3(-15.0f64..15.0), -3.0f64..3.0),
                1..4),
            vs in 0.5f64..2.0,
        ) {
            let specs: Vec<GridSpec> = grids.iter().map(|(d, s, o, angle)| {
                let (sn, cs) = angle.sin_cos();
                let m = Matrix4::new(
                    cs * s[0], -sn * s[1], 0.0, o[0],
                    sn * s[0], cs * s[1], 0.0, o[1],
                    0.0, 0.0, s[2], o[2],
                    0.0, 0.0, 0.0, 1.0);
                GridSpec::new(*d, AffineMap::new(m).unwrap()).unwrap()
            }).collect();
            let refs: Vec<&GridSpec> = specs.iter().collect();
            let hr = hr_grid_from_observations(&refs, vs).unwrap();
            let hb = hr.world_bounds();
            for g in &specs {
                prop_assert!(hb.contains(&g.world_bounds(), 1e-6));
            }
        }
    }
}
