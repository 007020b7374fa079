//! Inner linear solvers for `diag(a) + β DᵀD` systems: preconditioned CG and
//! a cell-centered geometric multigrid V-cycle.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parallel::{dot, norm_sq};
use crate::regularizer::Lattice;

/// Residual growth (relative to the initial residual) treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

const COARSEST_MAX_LEN: usize = 512;
const SMOOTH_OMEGA: f32 = 0.8;
const PRE_SMOOTH: usize = 2;
const POST_SMOOTH: usize = 2;

pub trait LinearOperator: Sync {
    fn len(&self) -> usize;
    fn apply(&self, x: &[f32], out: &mut [f32]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait Preconditioner: Sync {
    fn apply(&self, r: &[f32], out: &mut [f32]);
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f32], out: &mut [f32]) {
        out.copy_from_slice(r);
    }
}

/// `out = r / d` elementwise.
pub struct JacobiPreconditioner {
    inv_diag: Vec<f32>,
}

impl JacobiPreconditioner {
    pub fn new(diag: &[f32]) -> Self {
        Self { inv_diag: diag.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect() }
    }
}

impl Preconditioner for JacobiPreconditioner {
    fn apply(&self, r: &[f32], out: &mut [f32]) {
        out.par_iter_mut().zip(r.par_iter().zip(&self.inv_diag)).for_each(|(o, (&r, &d))| *o = r * d);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// `diag(a) + β DᵀD` on a lattice; `a ≥ 0`, `β ≥ 0`.
#[derive(Clone, Debug)]
pub struct MajorizerOp {
    pub lattice: Lattice,
    pub diag: Vec<f32>,
    pub beta: f64,
}

impl MajorizerOp {
    pub fn new(lattice: Lattice, diag: Vec<f32>, beta: f64) -> Self {
        assert_eq!(lattice.len(), diag.len());
        Self { lattice, diag, beta }
    }

    /// Full diagonal of the operator.
    pub fn diagonal(&self) -> Vec<f32> {
        let lat = self.lattice;
        (0..lat.len())
            .into_par_iter()
            .map(|n| (self.diag[n] as f64 + self.beta * crate::regularizer::dtd_diagonal(&lat, n)) as f32)
            .collect()
    }
}

impl LinearOperator for MajorizerOp {
    fn len(&self) -> usize {
        self.diag.len()
    }

    fn apply(&self, x: &[f32], out: &mut [f32]) {
        let d = self.lattice.dims;
        let st = [1, d[0], d[0] * d[1]];
        let w = self.lattice.spacing.map(|s| 2.0 * self.beta / (s * s));
        out.par_iter_mut().enumerate().for_each(|(n, o)| {
            let i = n % d[0];
            let r = n / d[0];
            let c = [i, r % d[1], r / d[1]];
            let v = x[n] as f64;
            let mut acc = self.diag[n] as f64 * v;
            for a in 0..3 {
                if c[a] >= 1 {
                    acc += w[a] * (v - x[n - st[a]] as f64);
                }
                if c[a] + 1 < d[a] {
                    acc += w[a] * (v - x[n + st[a]] as f64);
                }
            }
            *o = acc as f32;
        });
    }
}

/// Preconditioned conjugate gradients from the initial guess in `x`.
///
/// Stops at `‖r‖ ≤ tol·‖b‖` or after `max_iter` iterations; errors on
/// non-finite values, non-positive curvature, or a final residual more than
/// [`DIVERGENCE_FACTOR`] times the initial one.
pub fn pcg<A: LinearOperator + ?Sized, M: Preconditioner + ?Sized>(
    op: &A,
    precond: &M,
    b: &[f32],
    x: &mut [f32],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats> {
    let n = op.len();
    let b_norm = norm_sq(b).sqrt();
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, rel_residual: 0.0 });
    }
    let mut r = vec![0f32; n];
    op.apply(x, &mut r);
    r.par_iter_mut().zip(b).for_each(|(r, &b)| *r = b - *r);
    let r0 = norm_sq(&r).sqrt();
    let mut rnorm = r0;
    let mut z = vec![0f32; n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0f32; n];
    let mut it = 0;
    while it < max_iter && rnorm > tol * b_norm {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            // Non-positive curvature: the operator is not positive definite.
            return Err(Error::SolverDiverged { initial: r0, current: rnorm, iterations: it });
        }
        let alpha = (rz / pap) as f32;
        x.par_iter_mut().zip(&p).for_each(|(x, &p)| *x += alpha * p);
        r.par_iter_mut().zip(&ap).for_each(|(r, &ap)| *r -= alpha * ap);
        it += 1;
        rnorm = norm_sq(&r).sqrt();
        if !rnorm.is_finite() {
            return Err(Error::SolverDiverged { initial: r0, current: rnorm, iterations: it });
        }
        precond.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = (rz_new / rz) as f32;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(p, &z)| *p = z + beta * *p);
    }
    // CG residuals are not monotone, so growth is judged on the final iterate.
    if rnorm > DIVERGENCE_FACTOR * r0 {
        return Err(Error::SolverDiverged { initial: r0, current: rnorm, iterations: it });
    }
    Ok(SolveStats { iterations: it, rel_residual: rnorm / b_norm })
}

/// 1-D cell-centered linear prolongation weights for fine index `f`
/// onto a coarse axis of length `nc`.
#[inline]
fn prolong_weights(f: usize, nc: usize) -> [(usize, f32); 2] {
    let c = f / 2;
    let nb = if f.is_multiple_of(2) { c.checked_sub(1) } else { Some(c + 1).filter(|&v| v < nc) };
    match nb {
        Some(nb) => [(c, 0.75), (nb, 0.25)],
        None => [(c, 1.0), (c, 0.0)],
    }
}

fn coarse_dims(d: [usize; 3]) -> [usize; 3] {
    d.map(|n| if n > 1 { n.div_ceil(2) } else { 1 })
}

/// Trilinear prolongation `P` from `cd` to `fd`.
fn prolong(coarse: &[f32], cd: [usize; 3], fd: [usize; 3], out: &mut [f32]) {
    out.par_iter_mut().enumerate().for_each(|(n, o)| {
        let i = n % fd[0];
        let r = n / fd[0];
        let f = [i, r % fd[1], r / fd[1]];
        let w: [[(usize, f32); 2]; 3] = std::array::from_fn(|a| {
            if fd[a] == cd[a] {
                [(f[a], 1.0), (f[a], 0.0)]
            } else {
                prolong_weights(f[a], cd[a])
            }
        });
        let mut acc = 0.0f32;
        for &(cz, wz) in &w[2] {
            for &(cy, wy) in &w[1] {
                for &(cx, wx) in &w[0] {
                    let ww = wx * wy * wz;
                    if ww != 0.0 {
                        acc += ww * coarse[cx + cd[0] * (cy + cd[1] * cz)];
                    }
                }
            }
        }
        *o = acc;
    });
}

/// Restriction `R = Pᵀ / 2` per coarsened axis.
fn restrict(fine: &[f32], fd: [usize; 3], cd: [usize; 3], out: &mut [f32]) {
    // Per-axis gather lists (fine index, weight) for each coarse index.
    let lists: Vec<Vec<Vec<(usize, f32)>>> = (0..3)
        .map(|a| {
            (0..cd[a])
                .map(|c| {
                    if fd[a] == cd[a] {
                        return vec![(c, 1.0)];
                    }
                    let lo = (2 * c).saturating_sub(1);
                    let hi = (2 * c + 2).min(fd[a] - 1);
                    (lo..=hi)
                        .filter_map(|f| {
                            let w: f32 = prolong_weights(f, cd[a])
                                .iter()
                                .filter(|(cc, _)| *cc == c)
                                .map(|(_, w)| *w)
                                .sum();
                            (w != 0.0).then_some((f, 0.5 * w))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    out.par_iter_mut().enumerate().for_each(|(n, o)| {
        let i = n % cd[0];
        let r = n / cd[0];
        let (j, k) = (r % cd[1], r / cd[1]);
        let mut acc = 0.0f32;
        for &(fz, wz) in &lists[2][k] {
            for &(fy, wy) in &lists[1][j] {
                for &(fx, wx) in &lists[0][i] {
                    acc += wx * wy * wz * fine[fx + fd[0] * (fy + fd[1] * fz)];
                }
            }
        }
        *o = acc;
    });
}

struct Level {
    op: MajorizerOp,
    inv_diag: Vec<f32>,
}

/// Geometric multigrid hierarchy for a [`MajorizerOp`].
///
/// Cell-centered coarsening by 2 on every axis longer than one voxel,
/// trilinear prolongation, `R = Pᵀ/2ᵈ` restriction, coarse operators
/// rediscretized at doubled spacing, damped-Jacobi smoothing and a CG solve
/// on the coarsest level. The V-cycle is a symmetric positive definite
/// linear map, so it can precondition CG.
pub struct Multigrid {
    levels: Vec<Level>,
}

impl Multigrid {
    pub fn new(op: &MajorizerOp) -> Self {
        let mut levels = Vec::new();
        let mut cur = op.clone();
        loop {
            let inv_diag = cur.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
            let fd = cur.lattice.dims;
            let cd = coarse_dims(fd);
            let done = cur.len() <= COARSEST_MAX_LEN || cd == fd;
            let next = (!done).then(|| {
                let n_c: usize = cd.iter().product();
                let mut a = vec![0f32; n_c];
                restrict(&cur.diag, fd, cd, &mut a);
                let mut ones = vec![0f32; n_c];
                restrict(&vec![1.0; cur.len()], fd, cd, &mut ones);
                a.iter_mut().zip(&ones).for_each(|(a, &o)| *a /= o);
                let spacing = std::array::from_fn(|i| {
                    cur.lattice.spacing[i] * if cd[i] != fd[i] { 2.0 } else { 1.0 }
                });
                MajorizerOp::new(Lattice::new(cd, spacing), a, cur.beta)
            });
            levels.push(Level { op: cur, inv_diag });
            match next {
                Some(n) => cur = n,
                None => break,
            }
        }
        Self { levels }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn op(&self) -> &MajorizerOp {
        &self.levels[0].op
    }

    /// One V-cycle applied to `b` from a zero initial guess.
    pub fn vcycle(&self, b: &[f32], x: &mut [f32]) {
        self.cycle(0, b, x);
    }

    fn smooth(level: &Level, b: &[f32], x: &mut [f32], tmp: &mut [f32], steps: usize) {
        for _ in 0..steps {
            level.op.apply(x, tmp);
            x.par_iter_mut()
                .zip(tmp.par_iter().zip(b.par_iter().zip(&level.inv_diag)))
                .for_each(|(x, (&ax, (&b, &d)))| *x += SMOOTH_OMEGA * d * (b - ax));
        }
    }

    fn cycle(&self, l: usize, b: &[f32], x: &mut [f32]) {
        let level = &self.levels[l];
        x.iter_mut().for_each(|v| *v = 0.0);
        if l + 1 == self.levels.len() {
            let pre = JacobiPreconditioner { inv_diag: level.inv_diag.clone() };
            // The coarse problem is tiny; a failed solve only weakens the cycle.
            let _ = pcg(&level.op, &pre, b, x, 1e-6, 4 * level.op.len().max(50));
            return;
        }
        let n = level.op.len();
        let mut tmp = vec![0f32; n];
        Self::smooth(level, b, x, &mut tmp, PRE_SMOOTH);
        level.op.apply(x, &mut tmp);
        tmp.par_iter_mut().zip(b).for_each(|(t, &b)| *t = b - *t);
        let next = &self.levels[l + 1];
        let (fd, cd) = (level.op.lattice.dims, next.op.lattice.dims);
        let mut rc = vec![0f32; next.op.len()];
        restrict(&tmp, fd, cd, &mut rc);
        let mut ec = vec![0f32; next.op.len()];
        self.cycle(l + 1, &rc, &mut ec);
        prolong(&ec, cd, fd, &mut tmp);
        x.par_iter_mut().zip(&tmp).for_each(|(x, &e)| *x += e);
        Self::smooth(level, b, x, &mut tmp, POST_SMOOTH);
    }

    /// Stationary V-cycle iteration from the guess in `x`.
    pub fn solve(&self, b: &[f32], x: &mut [f32], tol: f64, max_iter: usize) -> Result<SolveStats> {
        let op = &self.levels[0].op;
        let n = op.len();
        let b_norm = norm_sq(b).sqrt();
        if b_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(SolveStats::default());
        }
        let mut r = vec![0f32; n];
        let mut e = vec![0f32; n];
        op.apply(x, &mut r);
        r.par_iter_mut().zip(b).for_each(|(r, &b)| *r = b - *r);
        let r0 = norm_sq(&r).sqrt();
        let mut rnorm = r0;
        let mut it = 0;
        while it < max_iter && rnorm > tol * b_norm {
            self.vcycle(&r, &mut e);
            x.par_iter_mut().zip(&e).for_each(|(x, &e)| *x += e);
            op.apply(x, &mut r);
            r.par_iter_mut().zip(b).for_each(|(r, &b)| *r = b - *r);
            it += 1;
            rnorm = norm_sq(&r).sqrt();
            if !rnorm.is_finite() || rnorm > DIVERGENCE_FACTOR * r0.max(b_norm) {
                return Err(Error::SolverDiverged { initial: r0, current: rnorm, iterations: it });
            }
        }
        Ok(SolveStats { iterations: it, rel_residual: rnorm / b_norm })
    }
}

impl Preconditioner for Multigrid {
    fn apply(&self, r: &[f32], out: &mut [f32]) {
        self.vcycle(r, out);
    }
}
