//! `mtvsr`: super-resolution and denoising of thick-sliced MR volumes.
//!
//! Exit codes: 0 success, 1 error, 2 solver stopped at `--max-iter` without
//! converging (outputs are still written).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mtvsr::harness::{self, DegradeSpec, MetricsRow, Problem};
use mtvsr::io::{read_volume, write_volume};
use mtvsr::parallel::with_threads;
use mtvsr::pipeline::{reconstruct, ChannelInput, Method, PipelineConfig};
use mtvsr::{Gap, InnerSolver, ProfileKind, RunReport, SliceProfile};

const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "mtvsr", version, about = "Multi-channel total-variation super-resolution of MR volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Reconstruct 1 mm isotropic volumes from thick-sliced inputs.
    Superres(ReconArgs),
    /// Denoise volumes in place on their own grid.
    Denoise(ReconArgs),
    /// Generate a phantom and simulated thick-slice acquisitions.
    Simulate(SimulateArgs),
    /// Compare methods and inner solvers on simulated data.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Gaussian,
    Box,
}

impl From<ProfileArg> for ProfileKind {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Gaussian => ProfileKind::Gaussian,
            ProfileArg::Box => ProfileKind::Box,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InnerArg {
    Multigrid,
    Cg,
}

#[derive(Args, Debug)]
struct SolverArgs {
    /// Relative objective change that ends the iterations.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// ADMM step size (default: heuristic from λ and τ).
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long, value_enum, default_value_t = InnerArg::Multigrid)]
    inner: InnerArg,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct ReconArgs {
    /// Channel inputs as NAME=PATH[,PATH...]; repeat per channel.
    #[arg(long = "channel", required = true, value_name = "NAME=PATHS")]
    channels: Vec<String>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value = "mtv")]
    method: Method,
    /// Isotropic output voxel size in mm.
    #[arg(long, default_value_t = 1.0)]
    voxel_size: f64,
    /// Slice gap as a fraction of the slice thickness.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    gap_ratio: f64,
    #[arg(long, value_enum, default_value_t = ProfileArg::Gaussian)]
    profile: ProfileArg,
    /// Fixed λ for a channel as NAME=VALUE; repeatable.
    #[arg(long = "lambda", value_name = "NAME=VALUE")]
    lambdas: Vec<String>,
    /// Fixed τ for all images of a channel as NAME=VALUE; repeatable.
    #[arg(long = "tau", value_name = "NAME=VALUE")]
    taus: Vec<String>,
    /// Multiplier on every estimated λ.
    #[arg(long, default_value_t = 1.0)]
    lambda_scale: f64,
    /// B-spline order for `--method bs`.
    #[arg(long, default_value_t = 4)]
    bs_order: usize,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Phantom edge length in voxels.
    #[arg(long, default_value_t = 32)]
    dims: usize,
    #[arg(long, default_value_t = 2)]
    channels: usize,
    /// Slice thickness in mm for every channel; omit for random 2–8 mm.
    #[arg(long)]
    thickness: Option<f64>,
    /// Noise as a percentage of the mean tissue intensity.
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    gap_ratio: f64,
    #[arg(long, value_enum, default_value_t = ProfileArg::Gaussian)]
    profile: ProfileArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Enforce the 2–8 mm thickness range and orthogonal slice axes.
    #[arg(long)]
    strict: bool,
}

impl PhantomArgs {
    fn spec(&self, seed: u64) -> DegradeSpec {
        let mut spec = match self.thickness {
            Some(t) => DegradeSpec::orthogonal(self.channels, t, self.noise, seed),
            None => DegradeSpec::random(self.channels, self.noise, seed),
        };
        for ch in &mut spec.channels {
            ch.gap_ratio = self.gap_ratio;
            ch.profile = self.profile.into();
        }
        spec
    }

    fn problem(&self, seed: u64) -> Result<Problem> {
        let truth = harness::make_phantom([self.dims; 3], self.channels, seed)?;
        let spec = self.spec(seed);
        spec.validate(truth[0].grid(), self.strict)?;
        Ok(harness::simulate(&truth, &spec)?)
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    phantom: PhantomArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    phantom: PhantomArgs,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Comma-separated methods to compare.
    #[arg(long, value_delimiter = ',', default_value = "bs,fot,tv,mtv")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("expected NAME=VALUE, got '{s}'"))?;
    if k.is_empty() || v.is_empty() {
        bail!("expected NAME=VALUE, got '{s}'");
    }
    Ok((k.to_string(), v.to_string()))
}

fn parse_overrides(items: &[String], what: &str) -> Result<BTreeMap<String, f64>> {
    items
        .iter()
        .map(|s| {
            let (k, v) = parse_assignment(s)?;
            let x: f64 = v.parse().with_context(|| format!("{what} for channel {k}: '{v}' is not a number"))?;
            Ok((k, x))
        })
        .collect()
}

fn load_channels(specs: &[String]) -> Result<Vec<ChannelInput>> {
    specs
        .iter()
        .map(|s| {
            let (name, paths) = parse_assignment(s)?;
            let volumes = paths
                .split(',')
                .map(|p| read_volume(p).with_context(|| format!("reading {p}")))
                .collect::<Result<Vec<_>>>()?;
            Ok(ChannelInput::new(name, volumes))
        })
        .collect()
}

fn pipeline_config(a: &ReconArgs, denoise: bool) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig {
        method: a.method,
        voxel_size: a.voxel_size,
        profile: SliceProfile::gaussian().with_kind(a.profile.into()).with_gap(Gap::Ratio(a.gap_ratio)),
        lambda_override: parse_overrides(&a.lambdas, "lambda")?,
        tau_override: parse_overrides(&a.taus, "tau")?,
        lambda_scale: a.lambda_scale,
        bs_order: a.bs_order,
        denoise,
        ..PipelineConfig::default()
    };
    cfg.solver.tol = a.solver.tol;
    cfg.solver.max_iter = a.solver.max_iter;
    cfg.solver.rho = a.solver.rho;
    cfg.solver.threads = a.solver.threads;
    cfg.solver.inner = match a.solver.inner {
        InnerArg::Multigrid => InnerSolver::Multigrid,
        InnerArg::Cg => InnerSolver::Cg,
    };
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn error_report(method: &str, err: &anyhow::Error, started: Instant) -> RunReport {
    RunReport {
        method: method.to_string(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        notes: vec![format!("error: {err:#}")],
        ..RunReport::default()
    }
}

fn run_recon(a: &ReconArgs, denoise: bool) -> Result<u8> {
    create_out(&a.out)?;
    let started = Instant::now();
    let report_path = a.out.join("report.json");
    let result = (|| -> Result<u8> {
        let cfg = pipeline_config(a, denoise)?;
        let inputs = load_channels(&a.channels)?;
        let rec = with_threads(cfg.solver.threads, || reconstruct(&inputs, &cfg))??;
        for (name, v) in rec.names.iter().zip(&rec.channels) {
            let p = a.out.join(format!("{name}.nii"));
            write_volume(v, &p).with_context(|| format!("writing {}", p.display()))?;
        }
        rec.report.write(&report_path)?;
        log::info!(
            "{}: {} iterations, converged {}, {:.1} s",
            rec.report.method,
            rec.report.iterations,
            rec.report.converged,
            rec.report.wall_clock_seconds
        );
        Ok(if rec.report.converged { 0 } else { EXIT_NOT_CONVERGED })
    })();
    if let Err(e) = &result {
        if let Err(w) = error_report(&a.method.to_string(), e, started).write(&report_path) {
            log::error!("could not write {}: {w}", report_path.display());
        }
    }
    result
}

#[derive(Serialize)]
struct Manifest<'a> {
    dims: [usize; 3],
    seed: u64,
    spec: &'a DegradeSpec,
    truth: Vec<String>,
    inputs: Vec<String>,
}

fn run_simulate(a: &SimulateArgs) -> Result<u8> {
    create_out(&a.out)?;
    let started = Instant::now();
    let p = a.phantom.problem(a.phantom.seed)?;
    let mut truth = Vec::new();
    let mut inputs = Vec::new();
    for (t, input) in p.truth.iter().zip(&p.inputs) {
        let tp = format!("truth_{}.nii", input.name);
        let ip = format!("{}.nii", input.name);
        write_volume(t, a.out.join(&tp))?;
        write_volume(&input.volumes[0], a.out.join(&ip))?;
        truth.push(tp);
        inputs.push(ip);
    }
    let manifest = Manifest { dims: [a.phantom.dims; 3], seed: a.phantom.seed, spec: &p.spec, truth, inputs };
    let mp = a.out.join("manifest.json");
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).with_context(|| format!("writing {}", mp.display()))?;
    let report = RunReport {
        method: "simulate".into(),
        converged: true,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        ..RunReport::default()
    };
    report.write(a.out.join("report.json"))?;
    Ok(0)
}

#[derive(Serialize)]
struct MetricsCsvRow<'a> {
    seed: u64,
    method: &'a str,
    channel: &'a str,
    rmse: f64,
    psnr: f64,
    iterations: usize,
    seconds: f64,
}

#[derive(Serialize)]
struct TraceCsvRow<'a> {
    seed: u64,
    run: &'a str,
    iteration: usize,
    seconds: f64,
    objective: f64,
}

fn run_bench(a: &BenchArgs) -> Result<u8> {
    create_out(&a.out)?;
    let started = Instant::now();
    let mut metrics = csv::Writer::from_path(a.out.join("metrics.csv"))?;
    let mut traces = csv::Writer::from_path(a.out.join("traces.csv"))?;
    let mut notes = Vec::new();
    for seed in a.phantom.seed..a.phantom.seed + a.seeds {
        let p = a.phantom.problem(seed)?;
        for &method in &a.methods {
            let mut cfg = PipelineConfig { method, ..PipelineConfig::default() };
            cfg.solver.tol = a.tol;
            cfg.solver.max_iter = a.max_iter;
            cfg.solver.threads = a.threads;
            let rec = with_threads(a.threads, || p.reconstruct(&cfg))??;
            let rows: Vec<MetricsRow> = p.metrics(method, &rec)?;
            for r in &rows {
                metrics.serialize(MetricsCsvRow {
                    seed,
                    method: &r.method,
                    channel: &r.channel,
                    rmse: r.rmse,
                    psnr: r.psnr,
                    iterations: rec.report.iterations,
                    seconds: rec.report.wall_clock_seconds,
                })?;
            }
            if method == Method::Mtv {
                let cmp = with_threads(a.threads, || harness::compare_inner_solvers(&p, &cfg))??;
                for r in cmp.rows() {
                    traces.serialize(TraceCsvRow {
                        seed,
                        run: &format!("mtv/{}", r.solver),
                        iteration: r.iteration,
                        seconds: r.seconds,
                        objective: r.objective,
                    })?;
                }
                notes.push(format!(
                    "seed {seed}: multigrid vs cg final objective relative difference {:.3e}",
                    cmp.final_relative_difference()
                ));
            } else if let (Some(obj), Some(secs)) = (&rec.report.objective_trace, &rec.report.elapsed_trace) {
                for (i, (o, s)) in obj.iter().zip(secs).enumerate() {
                    traces.serialize(TraceCsvRow { seed, run: &method.to_string(), iteration: i, seconds: *s, objective: *o })?;
                }
            }
        }
    }
    metrics.flush()?;
    traces.flush()?;
    let report = RunReport {
        method: "bench".into(),
        converged: true,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        notes,
        ..RunReport::default()
    };
    report.write(a.out.join("report.json"))?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MTVSR_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Superres(a) => run_recon(a, false),
        Command::Denoise(a) => run_recon(a, true),
        Command::Simulate(a) => run_simulate(a),
        Command::Bench(a) => run_bench(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
