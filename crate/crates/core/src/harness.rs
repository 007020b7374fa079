//! Synthetic experiments: phantom generation, simulated thick-slice
//! acquisitions, reconstruction metrics, λ grid search and inner-solver
//! comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Gap, ProfileKind, ProjectionOperator, SliceProfile, DEFAULT_GAP_RATIO};
use crate::pipeline::{reconstruct_with, ChannelInput, Method, PipelineConfig, Reconstruction};
use crate::report::RunReport;
use crate::solver::InnerSolver;
use crate::volume::{AffineMap, GridSpec, Volume};

/// Smallest phantom edge length.
pub const MIN_PHANTOM_DIM: usize = 16;

/// Tissue intensities per label (air, scalp, grey, white, fluid, lesion).
const CONTRASTS: [[f32; 6]; 3] = [
    [0.0, 35.0, 55.0, 85.0, 15.0, 40.0],
    [0.0, 45.0, 70.0, 45.0, 100.0, 90.0],
    [0.0, 55.0, 80.0, 65.0, 90.0, 75.0],
];

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    /// Rotation about z.
    angle: f64,
    label: u8,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let (s, c) = self.angle.sin_cos();
        let q = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        (0..3).map(|a| (q[a] / self.semi[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

/// Tissue label map shared by all phantom channels.
pub fn phantom_labels(dims: [usize; 3], seed: u64) -> Result<Vec<u8>> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
        return Err(Error::InvalidParameter(format!("phantom needs at least {MIN_PHANTOM_DIM} voxels per axis, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = dims.map(|v| v as f64);
    let center = d.map(|v| (v - 1.0) / 2.0);
    let mut jitter = |f: [f64; 3]| -> [f64; 3] { std::array::from_fn(|a| f[a] * d[a] * rng.random_range(0.95..1.05)) };
    let mut shapes = vec![
        Ellipsoid { center, semi: jitter([0.44, 0.38, 0.40]), angle: 0.0, label: 1 },
        Ellipsoid { center, semi: jitter([0.37, 0.31, 0.33]), angle: 0.0, label: 2 },
        Ellipsoid { center, semi: jitter([0.27, 0.22, 0.24]), angle: 0.0, label: 3 },
    ];
    for side in [-1.0, 1.0] {
        shapes.push(Ellipsoid {
            center: [center[0] + side * 0.08 * d[0], center[1] + 0.02 * d[1], center[2]],
            semi: jitter([0.05, 0.13, 0.09]),
            angle: side * 0.2,
            label: 4,
        });
    }
    for _ in 0..3 {
        let r = 0.2;
        let c = std::array::from_fn(|a| center[a] + rng.random_range(-r..r) * d[a]);
        let semi = std::array::from_fn(|a| rng.random_range(0.03..0.07) * d[a]);
        shapes.push(Ellipsoid { center: c, semi, angle: rng.random_range(0.0..std::f64::consts::PI), label: 5 });
    }
    let n = dims.iter().product();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let p = [(i % dims[0]) as f64, ((i / dims[0]) % dims[1]) as f64, (i / (dims[0] * dims[1])) as f64];
            shapes.iter().filter(|e| e.contains(p)).map(|e| e.label).next_back().unwrap_or(0)
        })
        .collect())
}

/// Piecewise-constant multi-contrast head phantom on a 1 mm grid with
/// intensities in `[0, 100]`.
pub fn make_phantom(dims: [usize; 3], channels: usize, seed: u64) -> Result<Vec<Volume>> {
    if channels == 0 {
        return Err(Error::EmptyInput("channels"));
    }
    let labels = phantom_labels(dims, seed)?;
    let grid = GridSpec::axis_aligned(dims, [1.0; 3], [0.0; 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..channels)
        .map(|c| {
            let table: [f32; 6] = if c < CONTRASTS.len() {
                CONTRASTS[c]
            } else {
                std::array::from_fn(|l| if l == 0 { 0.0 } else { rng.random_range(10.0..100.0) })
            };
            Volume::new(grid, labels.iter().map(|&l| table[l as usize]).collect())
        })
        .collect()
}

/// Mean over non-zero (tissue) voxels.
pub fn tissue_mean(v: &Volume) -> Result<f64> {
    let (s, n) = v.observed_values().filter(|&x| x > 0.0).fold((0.0f64, 0usize), |(s, n), x| (s + x as f64, n + 1));
    if n == 0 {
        return Err(Error::InvalidParameter("volume has no tissue voxels".into()));
    }
    Ok(s / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelDegrade {
    pub slice_axis: usize,
    pub thickness_mm: f64,
    pub gap_ratio: f64,
    /// Rician noise level as a percentage of the mean tissue intensity.
    pub noise_percent: f64,
    pub profile: ProfileKind,
}

impl ChannelDegrade {
    pub fn new(slice_axis: usize, thickness_mm: f64, noise_percent: f64) -> Self {
        Self { slice_axis, thickness_mm, gap_ratio: DEFAULT_GAP_RATIO, noise_percent, profile: ProfileKind::Gaussian }
    }

    pub fn slice_profile(&self) -> SliceProfile {
        SliceProfile::gaussian().with_kind(self.profile.clone()).with_gap(Gap::Ratio(self.gap_ratio))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub channels: Vec<ChannelDegrade>,
    pub seed: u64,
}

/// Slice axes used for orthogonal acquisitions, in channel order.
const ORTHO_AXES: [usize; 3] = [2, 0, 1];

impl DegradeSpec {
    /// Same thickness and noise for every channel, slice axes z, x, y, ...
    pub fn orthogonal(channels: usize, thickness_mm: f64, noise_percent: f64, seed: u64) -> Self {
        Self {
            channels: (0..channels).map(|c| ChannelDegrade::new(ORTHO_AXES[c % 3], thickness_mm, noise_percent)).collect(),
            seed,
        }
    }

    /// Random thickness in `[2, 8]` mm per channel with mutually orthogonal
    /// slice axes (for up to three channels).
    pub fn random(channels: usize, noise_percent: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut axes = ORTHO_AXES;
        for i in (1..3).rev() {
            axes.swap(i, rng.random_range(0..=i));
        }
        Self {
            channels: (0..channels)
                .map(|c| ChannelDegrade::new(axes[c % 3], rng.random_range(2.0..=8.0), noise_percent))
                .collect(),
            seed,
        }
    }

    /// Checks the spec against the HR grid. `strict` also enforces the
    /// 2–8 mm thickness range.
    pub fn validate(&self, hr: &GridSpec, strict: bool) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::EmptyInput("channels"));
        }
        let vs = hr.voxel_size();
        for (c, ch) in self.channels.iter().enumerate() {
            if ch.slice_axis > 2 {
                return Err(Error::InvalidParameter(format!("channel {c}: slice axis {} out of range", ch.slice_axis)));
            }
            if !(ch.thickness_mm > vs[ch.slice_axis]) {
                return Err(Error::InvalidParameter(format!(
                    "channel {c}: thickness {} mm must exceed the HR voxel size {}",
                    ch.thickness_mm, vs[ch.slice_axis]
                )));
            }
            if strict && !(2.0..=8.0).contains(&ch.thickness_mm) {
                return Err(Error::InvalidParameter(format!(
                    "channel {c}: thickness {} mm outside [2, 8]",
                    ch.thickness_mm
                )));
            }
            if !(0.0..1.0).contains(&ch.gap_ratio) {
                return Err(Error::InvalidParameter(format!("channel {c}: gap ratio {} outside [0, 1)", ch.gap_ratio)));
            }
            if !(ch.noise_percent >= 0.0) {
                return Err(Error::InvalidParameter(format!("channel {c}: negative noise level")));
            }
        }
        if strict && self.channels.len() <= 3 {
            let mut axes: Vec<usize> = self.channels.iter().map(|c| c.slice_axis).collect();
            axes.sort_unstable();
            axes.dedup();
            if axes.len() != self.channels.len() {
                return Err(Error::InvalidParameter("slice axes must be mutually orthogonal".into()));
            }
        }
        Ok(())
    }
}

/// Thick-slice grid inside the HR field of view along `axis`.
pub fn thick_slice_grid(hr: &GridSpec, axis: usize, thickness_mm: f64) -> Result<GridSpec> {
    let h = hr.voxel_size()[axis];
    let n = hr.dims[axis];
    let step = thickness_mm / h;
    let n_lr = ((n as f64 / step + 1e-9).floor() as usize).max(1);
    let first = (n as f64 - 1.0) / 2.0 - (n_lr as f64 - 1.0) * step / 2.0;
    let mut scale = [1.0; 3];
    let mut offset = [0.0; 3];
    scale[axis] = step;
    offset[axis] = first;
    let index_map = AffineMap::scaled(scale, offset)?;
    let mut dims = hr.dims;
    dims[axis] = n_lr;
    GridSpec::new(dims, hr.affine.compose(&index_map))
}

/// `x = A y` plus Rician noise of the requested level.
pub fn degrade(hr: &Volume, spec: &ChannelDegrade, seed: u64) -> Result<(Volume, ProjectionOperator)> {
    let lr = thick_slice_grid(hr.grid(), spec.slice_axis, spec.thickness_mm)?;
    let op = ProjectionOperator::build(*hr.grid(), lr, spec.slice_profile())?;
    let clean = op.apply(hr)?;
    if spec.noise_percent == 0.0 {
        return Ok((clean, op));
    }
    let sigma = spec.noise_percent / 100.0 * tissue_mean(hr)?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (grid, data, mask) = clean.into_parts();
    let noisy = data
        .iter()
        .map(|&s| {
            let a = s as f64 + normal.sample(&mut rng);
            let b = normal.sample(&mut rng);
            (a * a + b * b).sqrt() as f32
        })
        .collect();
    Ok((Volume::with_mask(grid, noisy, mask)?, op))
}

pub fn channel_name(c: usize) -> String {
    ["t1", "t2", "pd"].get(c).map(|s| s.to_string()).unwrap_or_else(|| format!("c{c}"))
}

/// A simulated acquisition with its ground truth.
#[derive(Clone, Debug)]
pub struct Problem {
    pub truth: Vec<Volume>,
    pub inputs: Vec<ChannelInput>,
    pub operators: Vec<Vec<ProjectionOperator>>,
    pub hr_grid: GridSpec,
    pub spec: DegradeSpec,
}

pub fn simulate(truth: &[Volume], spec: &DegradeSpec) -> Result<Problem> {
    let first = truth.first().ok_or(Error::EmptyInput("ground-truth channels"))?;
    if truth.len() != spec.channels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} truth channels but {} degradation specs",
            truth.len(),
            spec.channels.len()
        )));
    }
    spec.validate(first.grid(), false)?;
    let mut inputs = Vec::new();
    let mut operators = Vec::new();
    for (c, (y, ch)) in truth.iter().zip(&spec.channels).enumerate() {
        let seed = spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(c as u64);
        let (x, op) = degrade(y, ch, seed)?;
        inputs.push(ChannelInput::new(channel_name(c), vec![x]));
        operators.push(vec![op]);
    }
    Ok(Problem { truth: truth.to_vec(), inputs, operators, hr_grid: *first.grid(), spec: spec.clone() })
}

/// Edge length of the standard phantom.
pub const STANDARD_DIM: usize = 32;
/// Noise level of the standard phantom, in percent.
pub const STANDARD_NOISE: f64 = 2.0;

/// 2-channel 32³ phantom, orthogonal slices of the given thickness, 2% noise.
pub fn standard_problem(seed: u64, thickness_mm: f64) -> Result<Problem> {
    let truth = make_phantom([STANDARD_DIM; 3], 2, seed)?;
    simulate(&truth, &DegradeSpec::orthogonal(2, thickness_mm, STANDARD_NOISE, seed))
}

impl Problem {
    pub fn reconstruct(&self, cfg: &PipelineConfig) -> Result<Reconstruction> {
        reconstruct_with(&self.inputs, &self.hr_grid, self.operators.clone(), cfg)
    }

    pub fn metrics(&self, method: Method, rec: &Reconstruction) -> Result<Vec<MetricsRow>> {
        rec.channels
            .iter()
            .zip(&self.truth)
            .zip(&rec.names)
            .map(|((r, t), name)| {
                Ok(MetricsRow { method: method.to_string(), channel: name.clone(), rmse: rmse(r, t)?, psnr: psnr(r, t)? })
            })
            .collect()
    }

    pub fn mean_psnr(&self, rec: &Reconstruction) -> Result<f64> {
        let v: Vec<f64> = rec.channels.iter().zip(&self.truth).map(|(r, t)| psnr(r, t)).collect::<Result<_>>()?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub channel: String,
    pub rmse: f64,
    pub psnr: f64,
}

fn check_pair(recon: &Volume, reference: &Volume) -> Result<()> {
    if recon.dims() != reference.dims() {
        return Err(Error::DimensionMismatch { expected: reference.dims(), got: recon.dims() });
    }
    Ok(())
}

/// RMSE over mutually unmasked voxels where `select` holds.
pub fn rmse_where(recon: &Volume, reference: &Volume, select: impl Fn(usize) -> bool) -> Result<f64> {
    check_pair(recon, reference)?;
    let (r, t) = (recon.data(), reference.data());
    let (rm, tm) = (recon.mask(), reference.mask());
    let (s, n) = (0..r.len())
        .filter(|&i| !rm[i] && !tm[i] && select(i))
        .fold((0.0f64, 0usize), |(s, n), i| (s + ((r[i] - t[i]) as f64).powi(2), n + 1));
    if n == 0 {
        return Err(Error::InvalidParameter("no overlapping voxels to compare".into()));
    }
    Ok((s / n as f64).sqrt())
}

/// `sqrt(mean (recon − ref)²)` over mutually unmasked voxels.
pub fn rmse(recon: &Volume, reference: &Volume) -> Result<f64> {
    rmse_where(recon, reference, |_| true)
}

/// `20·log10(max(ref) / RMSE)`; `+∞` when the images agree exactly.
pub fn psnr(recon: &Volume, reference: &Volume) -> Result<f64> {
    let e = rmse(recon, reference)?;
    let peak = reference.observed_values().fold(f32::NEG_INFINITY, f32::max) as f64;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / e).log10())
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    /// Multiplier on the heuristic λ of every channel.
    pub scale: f64,
    pub lambdas: Vec<f64>,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub points: Vec<LambdaPoint>,
    pub heuristic_psnr: f64,
}

impl LambdaSearch {
    pub fn best(&self) -> &LambdaPoint {
        self.points.iter().max_by(|a, b| a.psnr.total_cmp(&b.psnr)).expect("non-empty grid")
    }

    /// Best grid PSNR minus the heuristic's (positive when the grid wins).
    pub fn gap_db(&self) -> f64 {
        self.best().psnr.max(self.heuristic_psnr) - self.heuristic_psnr
    }
}

/// Mean PSNR over channels for each multiple of the heuristic λ.
pub fn lambda_grid_search(problem: &Problem, scales: &[f64], cfg: &PipelineConfig) -> Result<LambdaSearch> {
    if scales.is_empty() {
        return Err(Error::EmptyInput("lambda grid"));
    }
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter(format!("lambda multiples must be > 0, got {s}")));
    }
    let run = |scale: f64| -> Result<(Vec<f64>, f64)> {
        let c = PipelineConfig { lambda_scale: scale, ..cfg.clone() };
        let rec = problem.reconstruct(&c)?;
        Ok((rec.report.channels.iter().map(|c| c.lambda).collect(), problem.mean_psnr(&rec)?))
    };
    let (_, heuristic_psnr) = run(1.0)?;
    let points = scales
        .iter()
        .map(|&scale| run(scale).map(|(lambdas, psnr)| LambdaPoint { scale, lambdas, psnr }))
        .collect::<Result<_>>()?;
    Ok(LambdaSearch { points, heuristic_psnr })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub solver: String,
    pub iteration: usize,
    pub seconds: f64,
    pub objective: f64,
}

#[derive(Clone, Debug)]
pub struct SolverComparison {
    pub multigrid: RunReport,
    pub cg: RunReport,
}

impl SolverComparison {
    pub fn rows(&self) -> Vec<TraceRow> {
        [("multigrid", &self.multigrid), ("cg", &self.cg)]
            .into_iter()
            .flat_map(|(name, r)| {
                let obj = r.objective_trace.clone().unwrap_or_default();
                let secs = r.elapsed_trace.clone().unwrap_or_default();
                obj.into_iter()
                    .zip(secs)
                    .enumerate()
                    .map(move |(i, (o, s))| TraceRow { solver: name.into(), iteration: i, seconds: s, objective: o })
            })
            .collect()
    }

    pub fn final_relative_difference(&self) -> f64 {
        let a = self.multigrid.final_objective().unwrap_or(f64::NAN);
        let b = self.cg.final_objective().unwrap_or(f64::NAN);
        crate::solver::relative_change(a, b)
    }
}

/// Runs the same reconstruction with both inner solvers and the same outer
/// iteration budget.
pub fn compare_inner_solvers(problem: &Problem, cfg: &PipelineConfig) -> Result<SolverComparison> {
    let run = |inner: InnerSolver| -> Result<RunReport> {
        let mut c = cfg.clone();
        c.solver.inner = inner;
        Ok(problem.reconstruct(&c)?.report)
    };
    Ok(SolverComparison { multigrid: run(InnerSolver::Multigrid)?, cg: run(InnerSolver::Cg)? })
}
