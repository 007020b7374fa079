//! Noise and regularization parameters estimated from the observed images.
//!
//! A two-component Rician mixture is fitted to the intensity histogram by
//! EM. The Rician is treated as the magnitude of a 2-D Gaussian with mean
//! `(ν, 0)` and isotropic variance `σ²`, with the phase as a latent variable;
//! the M-step is then closed form:
//!
//! ```text
//! ν ← Σ w x r(xν/σ²) / Σ w,      r = I₁/I₀
//! σ² ← (Σ w x² / Σ w − ν²) / 2
//! ```
//!
//! so the histogram log-likelihood never decreases.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Ratio of gradient-magnitude spread to mean tissue intensity.
pub const K_LAMBDA: f64 = 4.67;

pub const DEFAULT_BINS: usize = 1024;
const MIN_VOXELS: usize = 1000;
const MIN_BINS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RicianComponent {
    pub nu: f64,
    pub sigma: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RicianMixtureFit {
    pub components: [RicianComponent; 2],
    pub air_index: usize,
    pub tau: f64,
    pub mu_tissue: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Log-likelihood after every EM iteration, initial value first.
    pub log_likelihood_trace: Vec<f64>,
}

impl RicianMixtureFit {
    pub fn air(&self) -> &RicianComponent {
        &self.components[self.air_index]
    }

    pub fn tissue(&self) -> &RicianComponent {
        &self.components[1 - self.air_index]
    }

    /// Noise standard deviation as a percentage of the mean tissue intensity.
    pub fn noise_percent(&self) -> f64 {
        100.0 * self.air().sigma / self.mu_tissue
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    pub bins: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Starting components; `None` uses the moment-based default.
    pub init: Option<[RicianComponent; 2]>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { bins: DEFAULT_BINS, max_iter: 10_000, tol: 1e-6, init: None }
    }
}

/// Exponentially scaled modified Bessel functions `(I₀(x)e⁻ˣ, I₁(x)e⁻ˣ)`
/// for `x ≥ 0` (polynomial approximations, relative error ~1e-7).
pub fn bessel_i0e_i1e(x: f64) -> (f64, f64) {
    let x = x.abs();
    if x <= 3.75 {
        let t = (x / 3.75).powi(2);
        let i0 = 1.0
            + t * (3.5156229
                + t * (3.0899424 + t * (1.2067492 + t * (0.2659732 + t * (0.0360768 + t * 0.0045813)))));
        let i1 = x
            * (0.5
                + t * (0.87890594
                    + t * (0.51498869
                        + t * (0.15084934 + t * (0.02658733 + t * (0.00301532 + t * 0.00032411))))));
        let e = (-x).exp();
        (i0 * e, i1 * e)
    } else {
        let t = 3.75 / x;
        let s = 1.0 / x.sqrt();
        let i0 = 0.39894228
            + t * (0.01328592
                + t * (0.00225319
                    + t * (-0.00157565
                        + t * (0.00916281
                            + t * (-0.02057706
                                + t * (0.02635537 + t * (-0.01647633 + t * 0.00392377)))))));
        let i1 = 0.39894228
            + t * (-0.03988024
                + t * (-0.00362018
                    + t * (0.00163801
                        + t * (-0.01031555
                            + t * (0.02282967
                                + t * (-0.02895312 + t * (0.01787654 - t * 0.00420059)))))));
        (i0 * s, i1 * s)
    }
}

/// `ln f(x; ν, σ)` for the Rician density.
pub fn rician_log_pdf(x: f64, nu: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let (i0e, _) = bessel_i0e_i1e(x * nu / s2);
    x.ln() - s2.ln() - (x - nu).powi(2) / (2.0 * s2) + i0e.ln()
}

/// Intensity histogram: bin centers and counts over `[0, max]`.
#[derive(Clone, Debug)]
pub struct Histogram {
    pub centers: Vec<f64>,
    pub counts: Vec<f64>,
    pub bin_width: f64,
}

impl Histogram {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

pub fn intensity_histogram(v: &Volume, bins: usize) -> Result<Histogram> {
    if bins < MIN_BINS {
        return Err(Error::InvalidParameter(format!("need at least {MIN_BINS} bins, got {bins}")));
    }
    let values: Vec<f64> = v.observed_values().map(f64::from).collect();
    if values.len() < MIN_VOXELS {
        return Err(Error::InvalidParameter(format!(
            "need at least {MIN_VOXELS} observed voxels, got {}",
            values.len()
        )));
    }
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || max - min <= f64::EPSILON * max.abs() {
        return Err(Error::DegenerateFit(format!(
            "intensity range [{min}, {max}] has no spread"
        )));
    }
    if min < -1e-3 * max {
        return Err(Error::InvalidParameter(format!(
            "negative intensities (min {min}) are incompatible with a magnitude image"
        )));
    }
    let width = max / bins as f64;
    let mut counts = vec![0.0; bins];
    for x in values {
        let b = ((x.max(0.0) / width) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    let centers = (0..bins).map(|b| (b as f64 + 0.5) * width).collect();
    Ok(Histogram { centers, counts, bin_width: width })
}

/// Two-class Rician mixture fit with default options.
pub fn fit_rician_mixture(v: &Volume, bins: usize) -> Result<RicianMixtureFit> {
    fit_rician_mixture_with(v, &FitOptions { bins, ..FitOptions::default() })
}

pub fn fit_rician_mixture_with(v: &Volume, opts: &FitOptions) -> Result<RicianMixtureFit> {
    let hist = intensity_histogram(v, opts.bins)?;
    fit_histogram(&hist, opts)
}

fn default_init(hist: &Histogram) -> [RicianComponent; 2] {
    let n = hist.total();
    let mean = hist.centers.iter().zip(&hist.counts).map(|(x, c)| x * c).sum::<f64>() / n;
    let var = hist.centers.iter().zip(&hist.counts).map(|(x, c)| c * (x - mean).powi(2)).sum::<f64>() / n;
    let floor = hist.bin_width;
    [
        RicianComponent { nu: 0.0, sigma: (0.2 * mean).max(floor), weight: 0.5 },
        RicianComponent { nu: mean, sigma: (0.5 * var.sqrt()).max(floor), weight: 0.5 },
    ]
}

struct EmResult {
    comps: Vec<RicianComponent>,
    log_likelihood: f64,
    trace: Vec<f64>,
    iterations: usize,
}

fn run_em(hist: &Histogram, mut comps: Vec<RicianComponent>, opts: &FitOptions) -> Result<EmResult> {
    let k_n = comps.len();
    let nbins = hist.centers.len();
    let total = hist.total();
    let sigma_floor = 1e-3 * hist.bin_width;

    // log responsibilities, bin-major
    let mut log_p = vec![0.0f64; nbins * k_n];
    let eval = |comps: &[RicianComponent], log_p: &mut [f64]| -> f64 {
        let mut ll = 0.0;
        for (b, lp) in log_p.chunks_mut(k_n).enumerate() {
            let x = hist.centers[b];
            for (k, c) in comps.iter().enumerate() {
                lp[k] = c.weight.ln() + rician_log_pdf(x, c.nu, c.sigma);
            }
            let m = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lp.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            if hist.counts[b] > 0.0 {
                ll += hist.counts[b] * lse;
            }
            lp.iter_mut().for_each(|v| *v -= lse);
        }
        ll
    };

    let mut ll = eval(&comps, &mut log_p);
    let mut trace = vec![ll];
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        let mut next = comps.clone();
        for k in 0..k_n {
            let (mut sw, mut swx_r, mut swx2) = (0.0, 0.0, 0.0);
            let s2 = comps[k].sigma.powi(2);
            for b in 0..nbins {
                let c = hist.counts[b];
                if c == 0.0 {
                    continue;
                }
                let w = c * log_p[b * k_n + k].exp();
                let x = hist.centers[b];
                let (i0e, i1e) = bessel_i0e_i1e(x * comps[k].nu / s2);
                sw += w;
                swx_r += w * x * (i1e / i0e);
                swx2 += w * x * x;
            }
            if !(sw > 1e-9 * total) {
                return Err(Error::DegenerateFit(format!("component {k} lost all mass")));
            }
            let nu = swx_r / sw;
            let var = 0.5 * (swx2 / sw - nu * nu);
            if !(var.sqrt() > sigma_floor) {
                return Err(Error::DegenerateFit(format!(
                    "component {k} collapsed (sigma = {:.3e}, nu = {nu:.3e}) after {it} iterations",
                    var.max(0.0).sqrt()
                )));
            }
            next[k] = RicianComponent { nu, sigma: var.sqrt(), weight: sw / total };
        }
        comps = next;
        let new_ll = eval(&comps, &mut log_p);
        trace.push(new_ll);
        let done = (new_ll - ll).abs() < opts.tol * new_ll.abs().max(1.0);
        ll = new_ll;
        if done {
            break;
        }
    }
    Ok(EmResult { comps, log_likelihood: ll, trace, iterations })
}

/// Two-class fit on a histogram. When a single Rician explains the data as
/// well (by BIC), that class is used for both noise and signal level.
pub fn fit_histogram(hist: &Histogram, opts: &FitOptions) -> Result<RicianMixtureFit> {
    let init = opts.init.unwrap_or_else(|| default_init(hist));
    let two = run_em(hist, init.to_vec(), opts);

    let n = hist.total();
    let mean = hist.centers.iter().zip(&hist.counts).map(|(x, c)| x * c).sum::<f64>() / n;
    let mut single: Option<EmResult> = None;
    for nu in [0.0, mean] {
        let sd = init.iter().map(|c| c.sigma).fold(0.0, f64::max);
        let start = vec![RicianComponent { nu, sigma: sd, weight: 1.0 }];
        if let Ok(r) = run_em(hist, start, opts) {
            if single.as_ref().is_none_or(|s| r.log_likelihood > s.log_likelihood) {
                single = Some(r);
            }
        }
    }

    let bic = |ll: f64, k: f64| -2.0 * ll + k * n.ln();
    let two = match two {
        Ok(t) => Some(t),
        Err(e) if single.is_none() => return Err(e),
        Err(_) => None,
    };
    let use_single = match (&two, &single) {
        (Some(t), Some(s)) => bic(s.log_likelihood, 2.0) <= bic(t.log_likelihood, 5.0),
        (None, _) => true,
        (Some(_), None) => false,
    };

    if use_single {
        let s = single.expect("checked above");
        let c = s.comps[0];
        let mu = if c.nu > c.sigma { c.nu } else { mean };
        return Ok(RicianMixtureFit {
            components: [c, RicianComponent { weight: 0.0, ..c }],
            air_index: 0,
            tau: 1.0 / (c.sigma * c.sigma),
            mu_tissue: mu,
            log_likelihood: s.log_likelihood,
            iterations: s.iterations,
            log_likelihood_trace: s.trace,
        });
    }

    let t = two.expect("checked above");
    let comps = [t.comps[0], t.comps[1]];
    let air_index = if comps[0].nu <= comps[1].nu { 0 } else { 1 };
    let air = comps[air_index];
    let tissue = comps[1 - air_index];
    Ok(RicianMixtureFit {
        components: comps,
        air_index,
        tau: 1.0 / (air.sigma * air.sigma),
        mu_tissue: tissue.nu.max(0.0),
        log_likelihood: t.log_likelihood,
        iterations: t.iterations,
        log_likelihood_trace: t.trace,
    })
}

/// Noise precision `τ = 1/σ_air²`.
pub fn noise_precision(fit: &RicianMixtureFit) -> f64 {
    1.0 / fit.air().sigma.powi(2)
}

/// `λ = √2 / (k_λ · μ)`.
pub fn lambda_heuristic(mu_tissue: f64) -> Result<f64> {
    if !(mu_tissue > 0.0) || !mu_tissue.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "mean tissue intensity must be > 0, got {mu_tissue}"
        )));
    }
    Ok(std::f64::consts::SQRT_2 / (K_LAMBDA * mu_tissue))
}

/// Per-observation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationEstimate {
    pub tau: f64,
    pub mu: f64,
}

pub fn estimate_observation(v: &Volume) -> Result<ObservationEstimate> {
    let fit = fit_rician_mixture(v, DEFAULT_BINS)?;
    Ok(ObservationEstimate { tau: fit.tau, mu: fit.mu_tissue })
}

/// Channel regularization from its observations' tissue means.
pub fn channel_lambda(estimates: &[ObservationEstimate]) -> Result<(f64, f64)> {
    if estimates.is_empty() {
        return Err(Error::EmptyInput("observations for channel"));
    }
    let mu = estimates.iter().map(|e| e.mu).sum::<f64>() / estimates.len() as f64;
    Ok((lambda_heuristic(mu)?, mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn rician_samples(nus: &[f64], sigma: f64, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sigma).unwrap();
        nus.iter()
            .map(|&nu| {
                let a = nu + n.sample(&mut rng);
                let b = n.sample(&mut rng);
                (a * a + b * b).sqrt() as f32
            })
            .collect()
    }

    fn vol(data: Vec<f32>) -> Volume {
        let n = data.len();
        Volume::new(GridSpec::axis_aligned([n, 1, 1], [1.0; 3], [0.0; 3]).unwrap(), data).unwrap()
    }

    fn two_class(sigma: f64, seed: u64) -> Volume {
        let nus: Vec<f64> = (0..20_000).map(|i| if i % 5 < 3 { 0.0 } else { 100.0 }).collect();
        vol(rician_samples(&nus, sigma, seed))
    }

    #[test]
    fn bessel_reference_values() {
        // I0(1) = 1.2660658777, I1(1) = 0.5651591040, I0(5) = 27.239871823, I1(5) = 24.335642142
        let (a, b) = bessel_i0e_i1e(1.0);
        assert!((a * 1f64.exp() - 1.2660658777).abs() < 1e-6);
        assert!((b * 1f64.exp() - 0.5651591040).abs() < 1e-6);
        let (a, b) = bessel_i0e_i1e(5.0);
        assert!((a * 5f64.exp() / 27.239871823 - 1.0).abs() < 1e-6);
        assert!((b * 5f64.exp() / 24.335642142 - 1.0).abs() < 1e-6);
        assert_eq!(bessel_i0e_i1e(0.0), (1.0, 0.0));
        let (a, b) = bessel_i0e_i1e(1e4);
        assert!(a.is_finite() && b.is_finite() && b < a);
    }

    #[test]
    fn rician_pdf_integrates_to_one() {
        for (nu, sigma) in [(0.0, 5.0), (100.0, 5.0), (3.0, 2.0)] {
            let h = 0.01;
            let s: f64 = (1..40_000).map(|i| rician_log_pdf(i as f64 * h, nu, sigma).exp() * h).sum();
            assert!((s - 1.0).abs() < 1e-3, "nu={nu} sigma={sigma}: {s}");
        }
    }

    #[test]
    fn pure_rayleigh_sigma_recovered() {
        let mut errs = Vec::new();
        for seed in 0..20 {
            let v = vol(rician_samples(&vec![0.0; 20_000], 5.0, seed));
            let fit = fit_rician_mixture(&v, DEFAULT_BINS).unwrap();
            errs.push((fit.air().sigma - 5.0).abs() / 5.0);
        }
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        assert!(worst <= 0.05, "worst relative sigma error {worst}");
    }

    #[test]
    fn two_class_five_percent() {
        let mut pct = 0.0;
        let mut taus = 0.0;
        for seed in 0..20 {
            let fit = fit_rician_mixture(&two_class(5.0, seed), DEFAULT_BINS).unwrap();
            pct += fit.noise_percent();
            taus += noise_precision(&fit);
            assert_eq!(noise_precision(&fit), fit.tau);
        }
        pct /= 20.0;
        taus /= 20.0;
        assert!((pct - 5.0).abs() / 5.0 <= 0.15, "mean estimated noise {pct}%");
        assert!((taus - 0.04).abs() / 0.04 <= 0.30, "mean tau {taus}");
    }

    #[test]
    fn constant_image_is_degenerate() {
        let v = vol(vec![42.0; 5000]);
        assert!(matches!(fit_rician_mixture(&v, DEFAULT_BINS), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn rejects_negative_and_small_inputs() {
        let mut d = rician_samples(&vec![50.0; 5000], 5.0, 1);
        d[0] = -10.0;
        assert!(matches!(fit_rician_mixture(&vol(d), DEFAULT_BINS), Err(Error::InvalidParameter(_))));
        let small = rician_samples(&vec![50.0; 500], 5.0, 1);
        assert!(fit_rician_mixture(&vol(small), DEFAULT_BINS).is_err());
        let ok = rician_samples(&vec![50.0; 5000], 5.0, 1);
        assert!(fit_rician_mixture(&vol(ok), 32).is_err());
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let fit = fit_rician_mixture(&two_class(10.0, 3), DEFAULT_BINS).unwrap();
        for w in fit.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn scaling_intensities_scales_parameters() {
        let s = 3.5;
        for seed in 0..5 {
            let v = two_class(5.0, seed);
            let scaled = vol(v.data().iter().map(|x| x * s as f32).collect());
            let a = fit_rician_mixture(&v, DEFAULT_BINS).unwrap();
            let b = fit_rician_mixture(&scaled, DEFAULT_BINS).unwrap();
            assert!((b.mu_tissue / a.mu_tissue / s - 1.0).abs() < 0.02);
            assert!((b.air().sigma / a.air().sigma / s - 1.0).abs() < 0.02);
            let la = lambda_heuristic(a.mu_tissue).unwrap();
            let lb = lambda_heuristic(b.mu_tissue).unwrap();
            assert!((lb * s / la - 1.0).abs() < 0.02);
            assert!((b.tau * s * s / a.tau - 1.0).abs() < 0.04);
        }
    }

    #[test]
    fn swapped_initialization_gives_same_air_class() {
        let v = two_class(5.0, 9);
        let hist = intensity_histogram(&v, DEFAULT_BINS).unwrap();
        let init = default_init(&hist);
        let a = fit_histogram(&hist, &FitOptions { init: Some(init), ..Default::default() }).unwrap();
        let b = fit_histogram(&hist, &FitOptions { init: Some([init[1], init[0]]), ..Default::default() }).unwrap();
        assert_eq!(b.air_index, 1);
        assert!((a.air().nu - b.air().nu).abs() < 1e-6 * a.tissue().nu);
        assert!((a.air().sigma / b.air().sigma - 1.0).abs() < 1e-6);
    }

    #[test]
    fn lambda_heuristic_values() {
        let mu = std::f64::consts::SQRT_2 / 4.67;
        assert!((lambda_heuristic(mu).unwrap() - 1.0).abs() < 1e-12);
        assert!((lambda_heuristic(100.0).unwrap() - 2f64.sqrt() / 467.0).abs() < 1e-15);
        assert!((lambda_heuristic(100.0).unwrap() - 3.028e-3).abs() < 1e-6);
        assert!((lambda_heuristic(1.0).unwrap() - 0.3028).abs() < 1e-4);
        assert!(lambda_heuristic(0.0).is_err());
        assert!(lambda_heuristic(-1.0).is_err());
    }

    #[test]
    fn noise_precision_definition() {
        let mk = |s: f64| RicianMixtureFit {
            components: [
                RicianComponent { nu: 0.0, sigma: s, weight: 0.5 },
                RicianComponent { nu: 100.0, sigma: 3.0, weight: 0.5 },
            ],
            air_index: 0,
            tau: 0.0,
            mu_tissue: 100.0,
            log_likelihood: 0.0,
            iterations: 0,
            log_likelihood_trace: vec![],
        };
        assert!((noise_precision(&mk(5.0)) - 0.04).abs() < 1e-15);
        assert_eq!(noise_precision(&mk(1.0)), 1.0);
    }
}
