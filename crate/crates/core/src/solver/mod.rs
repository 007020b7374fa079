//! ADMM reconstruction of multi-channel high-resolution volumes.
//!
//! The objective is
//!
//! ```text
//! l(Y) = Σ_c Σ_i τ_ci/2 ‖M_ci (x_ci − A_ci y_c)‖² + prior(Y)
//! ```
//!
//! where `M` drops masked low-resolution voxels. With the splitting
//! `z_nc = λ_c D_n y_c`, each ADMM iteration performs one majorized Newton
//! step per channel on `y`, a group soft-threshold on `z` and a dual ascent
//! step on `w`. First-order Tikhonov is quadratic and solved directly.
//!
//! `z` and `w` are stored voxel-major: entry `(n, c, g)` sits at
//! `(n·C + c)·6 + g`.

pub mod linear;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ProjectionOperator;
use crate::parallel::{sum_f64, with_threads};
use crate::regularizer::{grad_adjoint_into, grad_into, prior_energy, GradientField, Lattice, PriorKind, G};
use crate::report::{ChannelReport, RunReport};
use crate::volume::{GridSpec, Volume};

use linear::{pcg, JacobiPreconditioner, LinearOperator, MajorizerOp, Multigrid, SolveStats};

/// One low-resolution image together with its projection and noise precision.
#[derive(Clone, Debug)]
pub struct Observation {
    pub volume: Volume,
    pub operator: ProjectionOperator,
    pub tau: f64,
}

impl Observation {
    pub fn new(volume: Volume, operator: ProjectionOperator, tau: f64) -> Self {
        Self { volume, operator, tau }
    }
}

#[derive(Clone, Debug)]
pub struct Channel {
    pub name: String,
    pub lambda: f64,
    /// Tissue mean the λ was derived from, if any (reporting only).
    pub mu: Option<f64>,
    pub observations: Vec<Observation>,
}

impl Channel {
    pub fn new(name: impl Into<String>, lambda: f64, observations: Vec<Observation>) -> Self {
        Self { name: name.into(), lambda, mu: None, observations }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerSolver {
    /// Multigrid V-cycles on the majorizer.
    #[default]
    Multigrid,
    /// Jacobi-preconditioned conjugate gradients on the majorizer.
    Cg,
}

impl std::fmt::Display for InnerSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InnerSolver::Multigrid => "multigrid",
            InnerSolver::Cg => "cg",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub rho: Option<f64>,
    pub inner: InnerSolver,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Majorized Newton steps on `y` per ADMM iteration.
    pub newton_steps: usize,
    pub threads: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-4,
            rho: None,
            inner: InnerSolver::Multigrid,
            inner_tol: 1e-4,
            inner_max_iter: 40,
            newton_steps: 1,
            threads: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub hr_grid: GridSpec,
    pub prior: PriorKind,
    pub channels: Vec<Channel>,
    pub options: SolverOptions,
}

impl ModelSpec {
    pub fn new(hr_grid: GridSpec, prior: PriorKind, channels: Vec<Channel>) -> Result<Self> {
        let m = Self { hr_grid, prior, channels, options: SolverOptions::default() };
        m.validate()?;
        Ok(m)
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::EmptyInput("channels"));
        }
        for ch in &self.channels {
            if !(ch.lambda > 0.0) || !ch.lambda.is_finite() {
                return Err(Error::InvalidParameter(format!("channel {}: lambda must be > 0, got {}", ch.name, ch.lambda)));
            }
            if ch.observations.is_empty() {
                return Err(Error::InvalidParameter(format!("channel {} has no observations", ch.name)));
            }
            for ob in &ch.observations {
                if !(ob.tau > 0.0) || !ob.tau.is_finite() {
                    return Err(Error::InvalidParameter(format!("channel {}: tau must be > 0, got {}", ch.name, ob.tau)));
                }
                let hr = ob.operator.hr_grid();
                if hr.dims != self.hr_grid.dims || !hr.same_geometry(&self.hr_grid, 1e-6) {
                    return Err(Error::InvalidGeometry(format!(
                        "channel {}: operator targets a different high-resolution grid",
                        ch.name
                    )));
                }
                if ob.volume.dims() != ob.operator.lr_grid().dims {
                    return Err(Error::DimensionMismatch { expected: ob.operator.lr_grid().dims, got: ob.volume.dims() });
                }
            }
        }
        let o = &self.options;
        if !(o.tol > 0.0) || !(o.inner_tol > 0.0) || o.inner_max_iter == 0 || o.newton_steps == 0 {
            return Err(Error::InvalidParameter("solver tolerances and step counts must be positive".into()));
        }
        if let Some(r) = o.rho {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidParameter(format!("rho must be > 0, got {r}")));
            }
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.lambda).collect()
    }

    pub fn taus(&self) -> Vec<f64> {
        self.channels.iter().flat_map(|c| c.observations.iter().map(|o| o.tau)).collect()
    }

    pub fn lattice(&self) -> Lattice {
        Lattice::of(&self.hr_grid)
    }

    pub fn rho(&self) -> Result<f64> {
        match self.options.rho {
            Some(r) => Ok(r),
            None => rho_heuristic(&self.lambdas(), &self.taus()),
        }
    }
}

/// `ρ = sqrt(mean λ_c) / mean τ_ci`.
pub fn rho_heuristic(lambdas: &[f64], taus: &[f64]) -> Result<f64> {
    if lambdas.is_empty() || taus.is_empty() {
        return Err(Error::EmptyInput("lambda or tau list"));
    }
    let ml = lambdas.iter().sum::<f64>() / lambdas.len() as f64;
    let mt = taus.iter().sum::<f64>() / taus.len() as f64;
    Ok(ml.sqrt() / mt)
}

/// Group soft-threshold `max(‖u‖ − 1/ρ, 0) · u/‖u‖`, in place.
pub fn prox_z_in_place(u: &mut [f32], rho: f64) {
    let norm = u.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    let scale = if norm > 0.0 { ((norm - 1.0 / rho).max(0.0) / norm) as f32 } else { 0.0 };
    u.iter_mut().for_each(|v| *v *= scale);
}

pub fn prox_z(u: &[f32], rho: f64) -> Vec<f32> {
    let mut z = u.to_vec();
    prox_z_in_place(&mut z, rho);
    z
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub y: Vec<Vec<f32>>,
    pub z: Vec<f32>,
    pub w: Vec<f32>,
    pub rho: f64,
    pub iter: usize,
    pub objective_trace: Vec<f64>,
    pub primal_residual_trace: Vec<f64>,
}

impl SolverState {
    pub fn zeros(model: &ModelSpec, rho: f64) -> Self {
        let n = model.hr_grid.len();
        let c = model.channels.len();
        Self {
            y: vec![vec![0.0; n]; c],
            z: vec![0.0; n * c * G],
            w: vec![0.0; n * c * G],
            rho,
            iter: 0,
            objective_trace: Vec::new(),
            primal_residual_trace: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.y.len()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize) -> usize {
        (n * self.channels() + c) * G
    }
}

/// Masked residual `M(A y − x)` of one observation.
fn residual(ob: &Observation, y: &[f32]) -> Vec<f32> {
    let mut r = vec![0f32; ob.volume.len()];
    ob.operator.apply_raw(y, &mut r);
    let x = ob.volume.data();
    let m = ob.volume.mask();
    r.par_iter_mut().enumerate().for_each(|(i, r)| *r = if m[i] { 0.0 } else { *r - x[i] });
    r
}

/// `Σ_i τ_i/2 ‖M(A_i y − x_i)‖²` for one channel.
pub fn data_term(channel: &Channel, y: &[f32]) -> f64 {
    channel
        .observations
        .iter()
        .map(|ob| {
            let r = residual(ob, y);
            0.5 * ob.tau * sum_f64(r.len(), |i| (r[i] as f64).powi(2))
        })
        .sum()
}

/// `Σ_i τ_i Aᵀ M(A_i y − x_i)`.
fn data_gradient(channel: &Channel, y: &[f32], out: &mut [f32]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut tmp = vec![0f32; out.len()];
    for ob in &channel.observations {
        let r = residual(ob, y);
        ob.operator.adjoint_raw(&r, Some(ob.volume.mask()), &mut tmp);
        let t = ob.tau as f32;
        out.par_iter_mut().zip(&tmp).for_each(|(o, &v)| *o += t * v);
    }
}

fn gradients(model: &ModelSpec, ys: &[Vec<f32>]) -> Vec<GradientField> {
    let lat = model.lattice();
    ys.iter()
        .map(|y| {
            let mut g = GradientField::zeros(lat);
            grad_into(&lat, y, &mut g.values);
            g
        })
        .collect()
}

fn objective_with(model: &ModelSpec, ys: &[Vec<f32>], gs: &[GradientField]) -> Result<f64> {
    let data: f64 = model.channels.iter().zip(ys).map(|(c, y)| data_term(c, y)).sum();
    Ok(data + prior_energy(model.prior, gs, &model.lambdas())?)
}

/// Negative log posterior (up to constants) of raw channel images.
pub fn objective(model: &ModelSpec, ys: &[Vec<f32>]) -> Result<f64> {
    check_channels(model, ys.iter().map(|y| y.len()))?;
    objective_with(model, ys, &gradients(model, ys))
}

pub fn objective_volumes(model: &ModelSpec, ys: &[Volume]) -> Result<f64> {
    let raw: Vec<Vec<f32>> = ys.iter().map(|v| v.data().to_vec()).collect();
    objective(model, &raw)
}

fn check_channels(model: &ModelSpec, lens: impl ExactSizeIterator<Item = usize>) -> Result<()> {
    if lens.len() != model.channels.len() {
        return Err(Error::InvalidParameter(format!(
            "expected {} channel images, got {}",
            model.channels.len(),
            lens.len()
        )));
    }
    let n = model.hr_grid.len();
    for l in lens {
        if l != n {
            return Err(Error::InvalidParameter(format!("channel image has {l} voxels, grid has {n}")));
        }
    }
    Ok(())
}

/// `diag(Σ_i τ_i Aᵢᵀ M Aᵢ 1)`, the data part of the majorizer.
pub fn data_diagonal(channel: &Channel) -> Vec<f32> {
    let mut acc: Vec<f32> = Vec::new();
    for ob in &channel.observations {
        let d = ob.operator.diag_ata_ones_masked(Some(ob.volume.mask()));
        if acc.is_empty() {
            acc = vec![0.0; d.len()];
        }
        let t = ob.tau as f32;
        acc.iter_mut().zip(&d).for_each(|(a, &v)| *a += t * v);
    }
    acc
}

/// `H = diag(Σ τ AᵀMA 1) + ρλ² DᵀD` for channel `c`.
pub fn majorizer(model: &ModelSpec, c: usize, rho: f64) -> MajorizerOp {
    let ch = &model.channels[c];
    MajorizerOp::new(model.lattice(), data_diagonal(ch), rho * ch.lambda * ch.lambda)
}

struct ChannelCtx {
    op: MajorizerOp,
    mg: Option<Multigrid>,
    jacobi: JacobiPreconditioner,
}

impl ChannelCtx {
    fn new(model: &ModelSpec, c: usize, beta_scale: f64) -> Self {
        let ch = &model.channels[c];
        let op = MajorizerOp::new(model.lattice(), data_diagonal(ch), beta_scale * ch.lambda.powi(2));
        let mg = (model.options.inner == InnerSolver::Multigrid).then(|| Multigrid::new(&op));
        let jacobi = JacobiPreconditioner::new(&op.diagonal());
        Self { op, mg, jacobi }
    }

    fn solve(&self, g: &[f32], d: &mut [f32], opts: &SolverOptions) -> Result<SolveStats> {
        d.iter_mut().for_each(|v| *v = 0.0);
        match &self.mg {
            Some(mg) => mg.solve(g, d, opts.inner_tol, opts.inner_max_iter),
            None => pcg(&self.op, &self.jacobi, g, d, opts.inner_tol, opts.inner_max_iter),
        }
    }
}

/// `u_n = w_nc + ρ(λ_c D_n y_c − z_nc)` for channel `c`.
fn dual_field(state: &SolverState, c: usize, lambda: f64, dy: &[[f32; G]]) -> Vec<[f32; G]> {
    let rho = state.rho as f32;
    let l = lambda as f32;
    (0..dy.len())
        .into_par_iter()
        .map(|n| {
            let o = state.offset(n, c);
            std::array::from_fn(|g| state.w[o + g] + rho * (l * dy[n][g] - state.z[o + g]))
        })
        .collect()
}

/// Gradient of the y-subproblem, `τAᵀM(Ay − x) + λDᵀ(w + ρ(λDy − z))`.
fn y_gradient(model: &ModelSpec, state: &SolverState, c: usize, y: &[f32], out: &mut [f32]) {
    let lat = model.lattice();
    let ch = &model.channels[c];
    data_gradient(ch, y, out);
    let mut dy = vec![[0f32; G]; y.len()];
    grad_into(&lat, y, &mut dy);
    let u = dual_field(state, c, ch.lambda, &dy);
    let mut dtu = vec![0f32; y.len()];
    grad_adjoint_into(&lat, &u, &mut dtu);
    let l = ch.lambda as f32;
    out.par_iter_mut().zip(&dtu).for_each(|(o, &v)| *o += l * v);
}

/// Augmented-Lagrangian terms that depend on `y_c`:
/// `Σ τ/2 ‖M(Ay − x)‖² + wᵀ(λDy − z) + ρ/2 ‖λDy − z‖²`.
pub fn y_subproblem_objective(model: &ModelSpec, state: &SolverState, c: usize, y: &[f32]) -> f64 {
    let ch = &model.channels[c];
    let lat = model.lattice();
    let mut dy = vec![[0f32; G]; y.len()];
    grad_into(&lat, y, &mut dy);
    let l = ch.lambda;
    let rho = state.rho;
    data_term(ch, y)
        + sum_f64(y.len(), |n| {
            let o = state.offset(n, c);
            (0..G)
                .map(|g| {
                    let r = l * dy[n][g] as f64 - state.z[o + g] as f64;
                    state.w[o + g] as f64 * r + 0.5 * rho * r * r
                })
                .sum::<f64>()
        })
}

fn update_y_with(model: &ModelSpec, ctx: &ChannelCtx, state: &SolverState, c: usize, y: &mut [f32]) -> Result<SolveStats> {
    let mut g = vec![0f32; y.len()];
    let mut d = vec![0f32; y.len()];
    let mut stats = SolveStats::default();
    for _ in 0..model.options.newton_steps {
        y_gradient(model, state, c, y, &mut g);
        let s = ctx.solve(&g, &mut d, &model.options)?;
        stats.iterations += s.iterations;
        stats.rel_residual = s.rel_residual;
        y.par_iter_mut().zip(&d).for_each(|(y, &d)| *y -= d);
    }
    Ok(stats)
}

/// Majorized Newton update of channel `c`: `y ← y − H⁻¹ ∂L/∂y`.
pub fn update_y(model: &ModelSpec, state: &mut SolverState, c: usize) -> Result<SolveStats> {
    let ctx = ChannelCtx::new(model, c, state.rho);
    let mut y = std::mem::take(&mut state.y[c]);
    let r = update_y_with(model, &ctx, state, c, &mut y);
    state.y[c] = y;
    r
}

/// `z_n = prox(w_n/ρ + stack_c λ_c D_n y_c)`, grouped over all channels for
/// MTV and per channel for TV.
pub fn update_z(model: &ModelSpec, state: &mut SolverState, dys: &[GradientField]) {
    let cn = state.channels();
    let rho = state.rho;
    let lambdas: Vec<f32> = model.lambdas().iter().map(|&l| l as f32).collect();
    let per_channel = model.prior == PriorKind::Tv;
    let inv_rho = (1.0 / rho) as f32;
    let w = &state.w;
    state.z.par_chunks_mut(cn * G).enumerate().for_each(|(n, z)| {
        let base = n * cn * G;
        for c in 0..cn {
            for g in 0..G {
                z[c * G + g] = w[base + c * G + g] * inv_rho + lambdas[c] * dys[c].values[n][g];
            }
        }
        if per_channel {
            z.chunks_mut(G).for_each(|zc| prox_z_in_place(zc, rho));
        } else {
            prox_z_in_place(z, rho);
        }
    });
}

/// `w ← w + ρ(λ D y − z)`.
pub fn update_w(model: &ModelSpec, state: &mut SolverState, dys: &[GradientField]) {
    let cn = state.channels();
    let rho = state.rho as f32;
    let lambdas: Vec<f32> = model.lambdas().iter().map(|&l| l as f32).collect();
    let z = &state.z;
    state.w.par_chunks_mut(cn * G).enumerate().for_each(|(n, w)| {
        let base = n * cn * G;
        for c in 0..cn {
            for g in 0..G {
                let i = c * G + g;
                w[i] += rho * (lambdas[c] * dys[c].values[n][g] - z[base + i]);
            }
        }
    });
}

/// `‖λ D y − z‖₂` over all channels.
pub fn primal_residual(model: &ModelSpec, state: &SolverState, dys: &[GradientField]) -> f64 {
    let cn = state.channels();
    let lambdas = model.lambdas();
    sum_f64(model.hr_grid.len(), |n| {
        let mut s = 0.0;
        for c in 0..cn {
            let o = state.offset(n, c);
            for g in 0..G {
                let r = lambdas[c] * dys[c].values[n][g] as f64 - state.z[o + g] as f64;
                s += r * r;
            }
        }
        s
    })
    .sqrt()
}

/// Relative objective change `|2(a − b)/(a + b)|`.
pub fn relative_change(a: f64, b: f64) -> f64 {
    let den = a + b;
    if den == 0.0 {
        if a == b { 0.0 } else { f64::INFINITY }
    } else {
        (2.0 * (a - b) / den).abs()
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub channels: Vec<Volume>,
    pub report: RunReport,
    pub state: SolverState,
}

impl Solution {
    pub fn final_objective(&self) -> f64 {
        *self.state.objective_trace.last().expect("trace holds the initial objective")
    }
}

fn base_report(model: &ModelSpec, method: &str) -> RunReport {
    RunReport {
        method: method.to_string(),
        channels: model
            .channels
            .iter()
            .map(|c| ChannelReport {
                name: c.name.clone(),
                lambda: c.lambda,
                mu: c.mu,
                tau: c.observations.iter().map(|o| o.tau).collect(),
            })
            .collect(),
        inner_solver: Some(model.options.inner.to_string()),
        ..Default::default()
    }
}

fn to_volumes(model: &ModelSpec, ys: &[Vec<f32>]) -> Result<Vec<Volume>> {
    ys.iter().map(|y| Volume::new(model.hr_grid, y.clone())).collect()
}

/// Runs the reconstruction selected by `model.prior`.
pub fn solve(model: &ModelSpec, initial: Option<&[Volume]>) -> Result<Solution> {
    model.validate()?;
    if let Some(init) = initial {
        check_channels(model, init.iter().map(|v| v.len()))?;
    }
    with_threads(model.options.threads, || match model.prior {
        PriorKind::Fot => fot_inner(model, initial),
        PriorKind::Tv | PriorKind::Mtv => admm_inner(model, initial),
    })?
}

fn admm_inner(model: &ModelSpec, initial: Option<&[Volume]>) -> Result<Solution> {
    let start = Instant::now();
    let rho = model.rho()?;
    let mut state = SolverState::zeros(model, rho);
    if let Some(init) = initial {
        state.y = init.iter().map(|v| v.data().to_vec()).collect();
    }
    let ctxs: Vec<ChannelCtx> = (0..model.channels.len()).map(|c| ChannelCtx::new(model, c, rho)).collect();

    let mut dys = gradients(model, &state.y);
    let l0 = objective_with(model, &state.y, &dys)?;
    if !l0.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 0, value: l0 });
    }
    state.objective_trace.push(l0);
    let mut elapsed = vec![start.elapsed().as_secs_f64()];
    let mut converged = false;

    for it in 1..=model.options.max_iter {
        // `state.y` stays in place: its length sets the z/w layout.
        let mut ys = state.y.clone();
        let stats: Vec<Result<SolveStats>> = ys
            .par_iter_mut()
            .enumerate()
            .map(|(c, y)| update_y_with(model, &ctxs[c], &state, c, y))
            .collect();
        state.y = ys;
        for (c, s) in stats.into_iter().enumerate() {
            let s = s?;
            log::trace!("iteration {it}, channel {c}: {} inner iterations, residual {:.2e}", s.iterations, s.rel_residual);
        }
        dys = gradients(model, &state.y);
        update_z(model, &mut state, &dys);
        state.primal_residual_trace.push(primal_residual(model, &state, &dys));
        update_w(model, &mut state, &dys);
        state.iter = it;

        let l = objective_with(model, &state.y, &dys)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: it, value: l });
        }
        let prev = *state.objective_trace.last().unwrap();
        state.objective_trace.push(l);
        elapsed.push(start.elapsed().as_secs_f64());
        let rel = relative_change(prev, l);
        log::debug!("iteration {it}: objective {l:.6e}, relative change {rel:.3e}");
        if rel < model.options.tol {
            converged = true;
            break;
        }
    }

    let method = model.prior.to_string();
    let mut report = base_report(model, &method);
    report.rho = Some(rho);
    report.iterations = state.iter;
    report.converged = converged;
    report.objective_trace = Some(state.objective_trace.clone());
    report.primal_residual_trace = Some(state.primal_residual_trace.clone());
    report.elapsed_trace = Some(elapsed);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(Solution { channels: to_volumes(model, &state.y)?, report, state })
}

/// `Σ τ AᵀMA + λ DᵀD` for one channel.
struct TikhonovHessian<'a> {
    channel: &'a Channel,
    lattice: Lattice,
}

impl LinearOperator for TikhonovHessian<'_> {
    fn len(&self) -> usize {
        self.lattice.len()
    }

    fn apply(&self, x: &[f32], out: &mut [f32]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut tmp = vec![0f32; x.len()];
        for ob in &self.channel.observations {
            let mut ax = vec![0f32; ob.volume.len()];
            ob.operator.apply_raw(x, &mut ax);
            ob.operator.adjoint_raw(&ax, Some(ob.volume.mask()), &mut tmp);
            let t = ob.tau as f32;
            out.par_iter_mut().zip(&tmp).for_each(|(o, &v)| *o += t * v);
        }
        crate::regularizer::apply_dtd(&self.lattice, x, &mut tmp);
        let l = self.channel.lambda as f32;
        out.par_iter_mut().zip(&tmp).for_each(|(o, &v)| *o += l * v);
    }
}

const FOT_TOL: f64 = 1e-6;
const FOT_MAX_ITER: usize = 500;

fn fot_inner(model: &ModelSpec, initial: Option<&[Volume]>) -> Result<Solution> {
    let start = Instant::now();
    let n = model.hr_grid.len();
    let lat = model.lattice();
    let mut ys: Vec<Vec<f32>> = match initial {
        Some(init) => init.iter().map(|v| v.data().to_vec()).collect(),
        None => vec![vec![0.0; n]; model.channels.len()],
    };
    let l0 = objective(model, &ys)?;
    let mut converged = true;
    for (c, ch) in model.channels.iter().enumerate() {
        let hess = TikhonovHessian { channel: ch, lattice: lat };
        // Right-hand side Σ τ AᵀM x.
        let mut b = vec![0f32; n];
        let mut tmp = vec![0f32; n];
        for ob in &ch.observations {
            ob.operator.adjoint_raw(ob.volume.data(), Some(ob.volume.mask()), &mut tmp);
            let t = ob.tau as f32;
            b.iter_mut().zip(&tmp).for_each(|(b, &v)| *b += t * v);
        }
        let pre = Multigrid::new(&MajorizerOp::new(lat, data_diagonal(ch), ch.lambda));
        let s = pcg(&hess, &pre, &b, &mut ys[c], FOT_TOL, FOT_MAX_ITER)?;
        log::debug!("fot channel {}: {} iterations, residual {:.2e}", ch.name, s.iterations, s.rel_residual);
        converged &= s.rel_residual <= FOT_TOL;
    }
    let l1 = objective(model, &ys)?;
    if !l1.is_finite() {
        return Err(Error::NonFiniteObjective { iteration: 1, value: l1 });
    }
    let state = SolverState {
        y: ys,
        z: Vec::new(),
        w: Vec::new(),
        rho: 0.0,
        iter: 1,
        objective_trace: vec![l0, l1],
        primal_residual_trace: Vec::new(),
    };
    let mut report = base_report(model, "fot");
    report.iterations = 1;
    report.converged = converged;
    report.objective_trace = Some(state.objective_trace.clone());
    report.inner_solver = Some("cg+multigrid".into());
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.elapsed_trace = Some(vec![0.0, report.wall_clock_seconds]);
    Ok(Solution { channels: to_volumes(model, &state.y)?, report, state })
}

/// First-order Tikhonov reconstruction; `model.prior` is ignored.
pub fn solve_fot(model: &ModelSpec) -> Result<Solution> {
    let mut m = model.clone();
    m.prior = PriorKind::Fot;
    solve(&m, None)
}
