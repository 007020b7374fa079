//! End-to-end reconstruction from grouped low-resolution images: HR grid
//! selection, parameter estimation, operator construction and dispatch to
//! the chosen method.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{bspline_channel, DEFAULT_ORDER};
use crate::error::{Error, Result};
use crate::estimation::{channel_lambda, estimate_observation, ObservationEstimate};
use crate::forward::{ProjectionOperator, SliceProfile};
use crate::regularizer::PriorKind;
use crate::report::{ChannelReport, RunReport};
use crate::solver::{solve, Channel, ModelSpec, Observation, SolverOptions};
use crate::volume::{hr_grid_from_observations, GridSpec, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Bs,
    Fot,
    Tv,
    Mtv,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bs, Method::Fot, Method::Tv, Method::Mtv];

    pub fn prior(self) -> Option<PriorKind> {
        match self {
            Method::Bs => None,
            Method::Fot => Some(PriorKind::Fot),
            Method::Tv => Some(PriorKind::Tv),
            Method::Mtv => Some(PriorKind::Mtv),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Bs => "bs",
            Method::Fot => "fot",
            Method::Tv => "tv",
            Method::Mtv => "mtv",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bs" => Ok(Method::Bs),
            "fot" => Ok(Method::Fot),
            "tv" => Ok(Method::Tv),
            "mtv" => Ok(Method::Mtv),
            _ => Err(Error::InvalidParameter(format!("unknown method '{s}' (expected bs, fot, tv or mtv)"))),
        }
    }
}

/// All images of one contrast.
#[derive(Clone, Debug)]
pub struct ChannelInput {
    pub name: String,
    pub volumes: Vec<Volume>,
}

impl ChannelInput {
    pub fn new(name: impl Into<String>, volumes: Vec<Volume>) -> Self {
        Self { name: name.into(), volumes }
    }
}

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub method: Method,
    /// Isotropic HR voxel size in mm.
    pub voxel_size: f64,
    pub profile: SliceProfile,
    pub solver: SolverOptions,
    /// Per-channel λ replacing the estimate.
    pub lambda_override: BTreeMap<String, f64>,
    /// Per-channel τ (applied to all of the channel's images) replacing the estimate.
    pub tau_override: BTreeMap<String, f64>,
    /// Multiplier applied to every estimated λ.
    pub lambda_scale: f64,
    pub bs_order: usize,
    /// Identity forward model on the input grid.
    pub denoise: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::Mtv,
            voxel_size: 1.0,
            profile: SliceProfile::gaussian(),
            solver: SolverOptions::default(),
            lambda_override: BTreeMap::new(),
            tau_override: BTreeMap::new(),
            lambda_scale: 1.0,
            bs_order: DEFAULT_ORDER,
            denoise: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelEstimate {
    pub name: String,
    pub lambda: f64,
    pub mu: Option<f64>,
    pub taus: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub names: Vec<String>,
    pub channels: Vec<Volume>,
    pub report: RunReport,
}

fn check_inputs(inputs: &[ChannelInput]) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("channels"));
    }
    for (i, ch) in inputs.iter().enumerate() {
        if ch.volumes.is_empty() {
            return Err(Error::InvalidParameter(format!("channel {} has no images", ch.name)));
        }
        if inputs[..i].iter().any(|o| o.name == ch.name) {
            return Err(Error::InvalidParameter(format!("duplicate channel name {}", ch.name)));
        }
    }
    Ok(())
}

/// Output grid: the input grid when denoising, otherwise the isotropic grid
/// covering every input's field of view.
pub fn output_grid(inputs: &[ChannelInput], cfg: &PipelineConfig) -> Result<GridSpec> {
    check_inputs(inputs)?;
    let first = inputs[0].volumes[0].grid();
    if cfg.denoise {
        for v in inputs.iter().flat_map(|c| &c.volumes) {
            if !v.grid().same_geometry(first, 1e-4) {
                return Err(Error::InvalidGeometry(format!(
                    "denoising needs identical grids: {:?} vs {:?}",
                    first.dims,
                    v.dims()
                )));
            }
        }
        return Ok(*first);
    }
    let grids: Vec<&GridSpec> = inputs.iter().flat_map(|c| c.volumes.iter().map(|v| v.grid())).collect();
    hr_grid_from_observations(&grids, cfg.voxel_size)
}

pub fn build_operators(inputs: &[ChannelInput], hr: &GridSpec, cfg: &PipelineConfig) -> Result<Vec<Vec<ProjectionOperator>>> {
    inputs
        .iter()
        .map(|ch| {
            ch.volumes
                .iter()
                .map(|v| {
                    if cfg.denoise {
                        ProjectionOperator::identity_between(*hr, *v.grid())
                    } else {
                        ProjectionOperator::build(*hr, *v.grid(), cfg.profile.clone())
                    }
                })
                .collect()
        })
        .collect()
}

/// Noise precision per image and λ per channel, honoring overrides.
pub fn estimate_parameters(inputs: &[ChannelInput], cfg: &PipelineConfig) -> Result<(Vec<ChannelEstimate>, Vec<String>)> {
    check_inputs(inputs)?;
    for name in cfg.lambda_override.keys().chain(cfg.tau_override.keys()) {
        if !inputs.iter().any(|c| &c.name == name) {
            return Err(Error::InvalidParameter(format!("override for unknown channel {name}")));
        }
    }
    let mut overrides = Vec::new();
    let mut out = Vec::new();
    for ch in inputs {
        let lam_o = cfg.lambda_override.get(&ch.name).copied();
        let tau_o = cfg.tau_override.get(&ch.name).copied();
        let need_fit = lam_o.is_none() || tau_o.is_none();
        let fits: Vec<ObservationEstimate> = if need_fit {
            ch.volumes
                .iter()
                .map(estimate_observation)
                .collect::<Result<_>>()
                .map_err(|e| Error::DegenerateFit(format!("channel {}: {e}", ch.name)))?
        } else {
            Vec::new()
        };
        let taus = match tau_o {
            Some(t) => {
                overrides.push(format!("tau[{}]={t}", ch.name));
                vec![t; ch.volumes.len()]
            }
            None => fits.iter().map(|f| f.tau).collect(),
        };
        let (lambda, mu) = match lam_o {
            Some(l) => {
                overrides.push(format!("lambda[{}]={l}", ch.name));
                (l, None)
            }
            None => {
                let (l, mu) = channel_lambda(&fits)?;
                (l * cfg.lambda_scale, Some(mu))
            }
        };
        if !(lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("channel {}: lambda must be > 0", ch.name)));
        }
        out.push(ChannelEstimate { name: ch.name.clone(), lambda, mu, taus });
    }
    if cfg.lambda_scale != 1.0 {
        overrides.push(format!("lambda_scale={}", cfg.lambda_scale));
    }
    Ok((out, overrides))
}

pub fn build_model(
    inputs: &[ChannelInput],
    hr: &GridSpec,
    operators: Vec<Vec<ProjectionOperator>>,
    estimates: &[ChannelEstimate],
    prior: PriorKind,
    solver: &SolverOptions,
) -> Result<ModelSpec> {
    let channels = inputs
        .iter()
        .zip(operators)
        .zip(estimates)
        .map(|((ch, ops), est)| {
            let obs = ch
                .volumes
                .iter()
                .zip(ops)
                .zip(&est.taus)
                .map(|((v, op), &tau)| Observation::new(v.clone(), op, tau))
                .collect();
            let mut c = Channel::new(ch.name.clone(), est.lambda, obs);
            c.mu = est.mu;
            c
        })
        .collect();
    Ok(ModelSpec::new(*hr, prior, channels)?.with_options(solver.clone()))
}

/// Full pipeline with operators derived from the input geometry.
pub fn reconstruct(inputs: &[ChannelInput], cfg: &PipelineConfig) -> Result<Reconstruction> {
    let hr = output_grid(inputs, cfg)?;
    let ops = if cfg.method == Method::Bs { Vec::new() } else { build_operators(inputs, &hr, cfg)? };
    reconstruct_with(inputs, &hr, ops, cfg)
}

/// Pipeline with caller-supplied operators (ignored for interpolation).
pub fn reconstruct_with(
    inputs: &[ChannelInput],
    hr: &GridSpec,
    operators: Vec<Vec<ProjectionOperator>>,
    cfg: &PipelineConfig,
) -> Result<Reconstruction> {
    check_inputs(inputs)?;
    let names: Vec<String> = inputs.iter().map(|c| c.name.clone()).collect();
    let Some(prior) = cfg.method.prior() else {
        let start = Instant::now();
        let channels = inputs
            .iter()
            .map(|ch| bspline_channel(&ch.volumes, hr, cfg.bs_order))
            .collect::<Result<Vec<_>>>()?;
        let report = RunReport {
            method: Method::Bs.to_string(),
            channels: inputs
                .iter()
                .map(|c| ChannelReport { name: c.name.clone(), lambda: 0.0, mu: None, tau: Vec::new() })
                .collect(),
            converged: true,
            wall_clock_seconds: start.elapsed().as_secs_f64(),
            notes: vec![format!("b-spline order {}", cfg.bs_order)],
            ..Default::default()
        };
        return Ok(Reconstruction { names, channels, report });
    };
    let (estimates, overrides) = estimate_parameters(inputs, cfg)?;
    let model = build_model(inputs, hr, operators, &estimates, prior, &cfg.solver)?;
    let sol = solve(&model, None)?;
    let mut report = sol.report;
    report.overrides = overrides;
    if cfg.denoise {
        report.notes.push("denoising (identity forward model)".into());
    }
    Ok(Reconstruction { names, channels: sol.channels, report })
}
