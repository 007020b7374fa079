//! Interpolation baselines: separable B-spline resampling onto the HR grid
//! and voxelwise averaging of same-contrast images.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{GridSpec, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationSpec {
    /// Spline degree: 0, 1, 3 or 4.
    pub order: usize,
    pub target: GridSpec,
}

impl InterpolationSpec {
    pub fn new(order: usize, target: GridSpec) -> Result<Self> {
        poles(order)?;
        Ok(Self { order, target })
    }
}

pub const DEFAULT_ORDER: usize = 4;

fn poles(order: usize) -> Result<&'static [f64]> {
    match order {
        0 | 1 => Ok(&[]),
        3 => Ok(&[-0.267_949_192_431_122_7]), // √3 − 2
        4 => Ok(&[-0.361_341_225_900_220_2, -0.013_725_429_297_339_2]),
        _ => Err(Error::InvalidParameter(format!("unsupported B-spline order {order} (use 0, 1, 3 or 4)"))),
    }
}

/// Centered B-spline of degree `order` at `t`.
pub fn bspline(order: usize, t: f64) -> f64 {
    let a = t.abs();
    match order {
        0 => {
            if a < 0.5 {
                1.0
            } else if a == 0.5 {
                0.5
            } else {
                0.0
            }
        }
        1 => (1.0 - a).max(0.0),
        3 => {
            if a < 1.0 {
                2.0 / 3.0 - a * a + 0.5 * a * a * a
            } else if a < 2.0 {
                (2.0 - a).powi(3) / 6.0
            } else {
                0.0
            }
        }
        4 => {
            let t2 = a * a;
            if a <= 0.5 {
                115.0 / 192.0 + t2 * (-5.0 / 8.0 + t2 / 4.0)
            } else if a <= 1.5 {
                (55.0 + a * (20.0 + a * (-120.0 + a * (80.0 - 16.0 * a)))) / 96.0
            } else if a < 2.5 {
                (5.0 - 2.0 * a).powi(4) / 384.0
            } else {
                0.0
            }
        }
        _ => panic!("unsupported B-spline order {order}"),
    }
}

/// Whole-sample mirror of index `k` into `0..n`.
#[inline]
fn mirror(k: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut m = k.rem_euclid(period);
    if m >= n as i64 {
        m = period - m;
    }
    m as usize
}

fn causal_init(c: &[f64], z: f64) -> f64 {
    let n = c.len();
    let horizon = ((1e-12f64).ln() / z.abs().ln()).ceil() as usize;
    if horizon < n {
        let mut zn = z;
        let mut sum = c[0];
        for &v in &c[1..horizon] {
            sum += zn * v;
            zn *= z;
        }
        sum
    } else {
        let iz = 1.0 / z;
        let mut zn = z;
        let mut z2n = z.powi(n as i32 - 1);
        let mut sum = c[0] + z2n * c[n - 1];
        z2n = z2n * z2n * iz;
        for &v in &c[1..n - 1] {
            sum += (zn + z2n) * v;
            zn *= z;
            z2n *= iz;
        }
        sum / (1.0 - zn * zn)
    }
}

/// In-place interpolation prefilter (samples → spline coefficients) for one
/// line with mirror boundaries.
pub fn prefilter_line(c: &mut [f64], order: usize) -> Result<()> {
    let ps = poles(order)?;
    let n = c.len();
    if n < 2 || ps.is_empty() {
        return Ok(());
    }
    let gain: f64 = ps.iter().map(|&z| (1.0 - z) * (1.0 - 1.0 / z)).product();
    c.iter_mut().for_each(|v| *v *= gain);
    for &z in ps {
        c[0] = causal_init(c, z);
        for k in 1..n {
            c[k] += z * c[k - 1];
        }
        c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
        for k in (0..n - 1).rev() {
            c[k] = z * (c[k + 1] - c[k]);
        }
    }
    Ok(())
}

/// Spline coefficients of a volume (prefilter along each axis).
pub fn coefficients(v: &Volume, order: usize) -> Result<Vec<f64>> {
    poles(order)?;
    let d = v.dims();
    let mut c: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let strides = [1, d[0], d[0] * d[1]];
    for a in 0..3 {
        let n = d[a];
        if n < 2 || order < 2 {
            continue;
        }
        let (o1, o2) = match a {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let lines: Vec<usize> = (0..d[o2])
            .flat_map(|q| (0..d[o1]).map(move |p| p * strides[o1] + q * strides[o2]))
            .collect();
        let filtered: Vec<Vec<f64>> = lines
            .par_iter()
            .map(|&base| {
                let mut line: Vec<f64> = (0..n).map(|i| c[base + i * strides[a]]).collect();
                prefilter_line(&mut line, order).expect("order checked");
                line
            })
            .collect();
        for (base, line) in lines.iter().zip(filtered) {
            for (i, v) in line.into_iter().enumerate() {
                c[base + i * strides[a]] = v;
            }
        }
    }
    Ok(c)
}

fn weights(order: usize, u: f64, n: usize) -> ([usize; 5], [f64; 5], usize) {
    let start = if order % 2 == 1 { u.floor() as i64 - (order as i64) / 2 } else { (u + 0.5).floor() as i64 - (order as i64) / 2 };
    let mut idx = [0usize; 5];
    let mut w = [0f64; 5];
    for j in 0..=order {
        let k = start + j as i64;
        idx[j] = mirror(k, n);
        w[j] = bspline(order, u - k as f64);
    }
    (idx, w, order + 1)
}

/// Evaluates a spline with coefficients `c` on grid `dims` at voxel
/// coordinates `u`.
pub fn evaluate(c: &[f64], dims: [usize; 3], order: usize, u: [f64; 3]) -> f64 {
    let (ix, wx, m) = weights(order, u[0], dims[0]);
    let (iy, wy, _) = weights(order, u[1], dims[1]);
    let (iz, wz, _) = weights(order, u[2], dims[2]);
    let mut s = 0.0;
    for k in 0..m {
        if wz[k] == 0.0 {
            continue;
        }
        for j in 0..m {
            let wjk = wy[j] * wz[k];
            if wjk == 0.0 {
                continue;
            }
            let row = dims[0] * (iy[j] + dims[1] * iz[k]);
            for i in 0..m {
                s += wx[i] * wjk * c[row + ix[i]];
            }
        }
    }
    s
}

/// Resamples `x` onto `spec.target`. Target voxels whose centers fall
/// outside the source field of view are masked.
pub fn bspline_upsample(x: &Volume, spec: &InterpolationSpec) -> Result<Volume> {
    let c = coefficients(x, spec.order)?;
    let d = x.dims();
    let to_src = x.affine().inverse().compose(&spec.target.affine);
    let target = spec.target;
    let tol = 1e-6;
    let (data, mask): (Vec<f32>, Vec<bool>) = (0..target.len())
        .into_par_iter()
        .map(|n| {
            let [i, j, k] = target.coords(n);
            let u = to_src.apply([i as f64, j as f64, k as f64]);
            let inside = (0..3).all(|a| u[a] >= -0.5 - tol && u[a] <= d[a] as f64 - 0.5 + tol);
            if inside {
                (evaluate(&c, d, spec.order, u) as f32, false)
            } else {
                (0.0, true)
            }
        })
        .unzip();
    Volume::with_mask(target, data, mask)
}

/// Voxelwise mean over the unmasked inputs.
pub fn average_same_channel(xs: &[Volume]) -> Result<Volume> {
    let first = xs.first().ok_or(Error::EmptyInput("volumes to average"))?;
    for v in xs {
        if !v.grid().same_geometry(first.grid(), 1e-6) {
            return Err(Error::InvalidGeometry("volumes to average are on different grids".into()));
        }
    }
    let n = first.len();
    let (data, mask): (Vec<f32>, Vec<bool>) = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut s, mut k) = (0.0f64, 0usize);
            for v in xs {
                if !v.mask()[i] {
                    s += v.data()[i] as f64;
                    k += 1;
                }
            }
            if k == 0 { (0.0, true) } else { ((s / k as f64) as f32, false) }
        })
        .unzip();
    Volume::with_mask(*first.grid(), data, mask)
}

/// Interpolates every image of one contrast onto `target` and averages.
pub fn bspline_channel(xs: &[Volume], target: &GridSpec, order: usize) -> Result<Volume> {
    let spec = InterpolationSpec::new(order, *target)?;
    let up: Vec<Volume> = xs.iter().map(|x| bspline_upsample(x, &spec)).collect::<Result<_>>()?;
    average_same_channel(&up)
}
