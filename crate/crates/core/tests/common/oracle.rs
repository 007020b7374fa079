//! Dense f64 reference minimizer for small multi-channel TV problems.
//!
//! The prior `Σ_n sqrt(Σ_c λ_c² ‖D_n y_c‖² + ε²)` is smoothed and minimized
//! by damped Newton steps with ε driven down by continuation. Everything
//! here is independent of the library's solver and stencils; only the
//! forward operators are taken from the model as dense matrices.

use nalgebra::{DMatrix, DVector};

use mtvsr::solver::ModelSpec;

/// One finite-difference entry of D: row `g` of voxel `n` touches `col`.
#[derive(Clone, Copy)]
struct Tap {
    g: usize,
    col: usize,
    w: f64,
}

pub struct DenseProblem {
    pub n: usize,
    pub lambdas: Vec<f64>,
    /// Per channel: (τ, A with masked rows dropped, x).
    pub obs: Vec<Vec<(f64, DMatrix<f64>, DVector<f64>)>>,
    taps: Vec<Vec<Tap>>,
    /// Channels share one norm (MTV) or each has its own (TV).
    pub joint: bool,
}

/// Forward and backward differences per axis, scaled by 1/spacing, with
/// entries that would cross the boundary left out.
fn stencil(dims: [usize; 3], spacing: [f64; 3]) -> Vec<Vec<Tap>> {
    let idx = |c: [usize; 3]| c[0] + dims[0] * (c[1] + dims[1] * c[2]);
    let mut out = Vec::with_capacity(dims.iter().product());
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                let c = [i, j, k];
                let mut taps = Vec::new();
                for a in 0..3 {
                    let h = 1.0 / spacing[a];
                    if c[a] + 1 < dims[a] {
                        let mut f = c;
                        f[a] += 1;
                        taps.push(Tap { g: 2 * a, col: idx(f), w: h });
                        taps.push(Tap { g: 2 * a, col: idx(c), w: -h });
                    }
                    if c[a] >= 1 {
                        let mut b = c;
                        b[a] -= 1;
                        taps.push(Tap { g: 2 * a + 1, col: idx(c), w: h });
                        taps.push(Tap { g: 2 * a + 1, col: idx(b), w: -h });
                    }
                }
                out.push(taps);
            }
        }
    }
    out
}

impl DenseProblem {
    pub fn from_model(model: &ModelSpec, joint: bool) -> Self {
        let n = model.hr_grid.len();
        let obs = model
            .channels
            .iter()
            .map(|ch| {
                ch.observations
                    .iter()
                    .map(|ob| {
                        let m = ob.volume.len();
                        let keep: Vec<usize> = (0..m).filter(|&i| !ob.volume.mask()[i]).collect();
                        let mut a = DMatrix::zeros(keep.len(), n);
                        let mut e = vec![0f32; n];
                        let mut col = vec![0f32; m];
                        for j in 0..n {
                            e[j] = 1.0;
                            ob.operator.apply_raw(&e, &mut col);
                            for (r, &i) in keep.iter().enumerate() {
                                a[(r, j)] = col[i] as f64;
                            }
                            e[j] = 0.0;
                        }
                        let x = DVector::from_iterator(keep.len(), keep.iter().map(|&i| ob.volume.data()[i] as f64));
                        (ob.tau, a, x)
                    })
                    .collect()
            })
            .collect();
        let spacing = model.hr_grid.voxel_size();
        Self {
            n,
            lambdas: model.channels.iter().map(|c| c.lambda).collect(),
            obs,
            taps: stencil(model.hr_grid.dims, spacing),
            joint,
        }
    }

    fn channels(&self) -> usize {
        self.lambdas.len()
    }

    /// `λ_c D_n y_c` for every channel, 6 entries each.
    fn local(&self, y: &DVector<f64>, v: usize) -> Vec<[f64; 6]> {
        (0..self.channels())
            .map(|c| {
                let mut u = [0.0; 6];
                for t in &self.taps[v] {
                    u[t.g] += self.lambdas[c] * t.w * y[c * self.n + t.col];
                }
                u
            })
            .collect()
    }

    /// Groups sharing one norm at a voxel.
    fn groups(&self) -> Vec<Vec<usize>> {
        if self.joint {
            vec![(0..self.channels()).collect()]
        } else {
            (0..self.channels()).map(|c| vec![c]).collect()
        }
    }

    pub fn objective(&self, y: &DVector<f64>, eps: f64) -> f64 {
        let mut f = 0.0;
        for (c, obs) in self.obs.iter().enumerate() {
            let yc = y.rows(c * self.n, self.n);
            for (tau, a, x) in obs {
                f += 0.5 * tau * (a * yc - x).norm_squared();
            }
        }
        let groups = self.groups();
        for v in 0..self.n {
            let u = self.local(y, v);
            for grp in &groups {
                let s2: f64 = grp.iter().flat_map(|&c| u[c].iter()).map(|x| x * x).sum();
                f += (s2 + eps * eps).sqrt();
            }
        }
        f
    }

    fn grad_hess(&self, y: &DVector<f64>, eps: f64) -> (DVector<f64>, DMatrix<f64>) {
        let cn = self.channels();
        let dim = cn * self.n;
        let mut g = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        for (c, obs) in self.obs.iter().enumerate() {
            let off = c * self.n;
            let yc = y.rows(off, self.n).into_owned();
            for (tau, a, x) in obs {
                let r = a * &yc - x;
                let gc = a.transpose() * r * *tau;
                let hc = a.transpose() * a * *tau;
                let mut gv = g.rows_mut(off, self.n);
                gv += gc;
                let mut hv = h.view_mut((off, off), (self.n, self.n));
                hv += hc;
            }
        }
        let groups = self.groups();
        for v in 0..self.n {
            let u = self.local(y, v);
            for grp in &groups {
                let s = (grp.iter().flat_map(|&c| u[c].iter()).map(|x| x * x).sum::<f64>() + eps * eps).sqrt();
                // Rows of B_n: (channel, tap) pairs with their column and weight.
                let rows: Vec<(usize, usize, usize, f64)> = grp
                    .iter()
                    .flat_map(|&c| self.taps[v].iter().map(move |t| (c, t.g, c * self.n + t.col, t.w)))
                    .map(|(c, gi, col, w)| (c, gi, col, self.lambdas[c] * w))
                    .collect();
                for &(c, gi, col, w) in &rows {
                    g[col] += w * u[c][gi] / s;
                }
                for &(c1, g1, col1, w1) in &rows {
                    for &(c2, g2, col2, w2) in &rows {
                        let mut m = -u[c1][g1] * u[c2][g2] / (s * s * s);
                        if c1 == c2 && g1 == g2 {
                            m += 1.0 / s;
                        }
                        h[(col1, col2)] += w1 * w2 * m;
                    }
                }
            }
        }
        (g, h)
    }

    /// Damped Newton on the ε-smoothed objective, ε decreasing from 1 to
    /// `eps_final` by factors of 10.
    pub fn minimize(&self, eps_final: f64) -> DVector<f64> {
        let dim = self.channels() * self.n;
        let mut y = DVector::zeros(dim);
        let mut eps = 1.0f64;
        loop {
            for _ in 0..100 {
                let (g, mut h) = self.grad_hess(&y, eps);
                let f0 = self.objective(&y, eps);
                let mut shift = 0.0;
                let step = loop {
                    if let Some(ch) = h.clone().cholesky() {
                        break -ch.solve(&g);
                    }
                    shift = if shift == 0.0 { 1e-10 * h.diagonal().amax() } else { shift * 10.0 };
                    for i in 0..dim {
                        h[(i, i)] += shift;
                    }
                };
                let decrement = -g.dot(&step);
                if decrement < 1e-13 * f0.abs().max(1.0) {
                    break;
                }
                let mut t = 1.0;
                while t > 1e-12 {
                    let cand = &y + &step * t;
                    if self.objective(&cand, eps) <= f0 - 0.25 * t * decrement {
                        y = cand;
                        break;
                    }
                    t *= 0.5;
                }
                if t <= 1e-12 {
                    break;
                }
            }
            if eps <= eps_final {
                return y;
            }
            eps = (eps / 10.0).max(eps_final);
        }
    }
}

pub fn flatten(ys: &[Vec<f32>]) -> DVector<f64> {
    DVector::from_iterator(ys.iter().map(|v| v.len()).sum(), ys.iter().flatten().map(|&v| v as f64))
}
