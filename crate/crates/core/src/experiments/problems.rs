//! The three benchmark integrals and their ground truths.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng as _;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::batch::Integrand;
use crate::error::{Error, Result};
use crate::gp::{fit_gp, sample_gp_prior, GaussianMeasure, GpModel, KernelParams, BASE_RELATIVE_JITTER};
use crate::optimise::uniform_in_box;
use crate::rng::{derive_seed, rng_for};
use crate::{sq_dist, Point};

/// Relative agreement required between a grid truth and its refinement, or
/// between an analytic truth and its numerical cross-check.
pub const TRUTH_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    InModel,
    Mixture,
    Evidence,
}

impl ExperimentKind {
    pub fn tag(self) -> &'static str {
        match self {
            ExperimentKind::InModel => "inmodel",
            ExperimentKind::Mixture => "mixture",
            ExperimentKind::Evidence => "evidence",
        }
    }

    pub fn default_dimension(self) -> usize {
        match self {
            ExperimentKind::Mixture => 4,
            _ => 2,
        }
    }

    pub fn default_budget(self) -> usize {
        match self {
            ExperimentKind::Mixture => 203,
            _ => 103,
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inmodel" => Ok(ExperimentKind::InModel),
            "mixture" => Ok(ExperimentKind::Mixture),
            "evidence" => Ok(ExperimentKind::Evidence),
            _ => Err(Error::argument(format!("unknown experiment {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruthMethod {
    Grid,
    Analytic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    /// `Z`, or `log Z` for problems reported on the log scale.
    pub value: f64,
    pub method: TruthMethod,
    /// Grid nodes per axis, for grid truths.
    pub resolution: Option<usize>,
}

/// How estimates are compared with the truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorScale {
    Linear,
    /// The integrand is `exp(log f − offset)`; estimates are reported as
    /// `log Ẑ + offset`.
    Log { offset: f64 },
}

pub struct Problem {
    pub kind: ExperimentKind,
    pub integrand: Box<dyn Integrand + Send>,
    pub prior: GaussianMeasure,
    pub truth: GroundTruth,
    pub scale: ErrorScale,
}

impl Problem {
    /// Maps an estimate of the integrand's integral to the reported scale.
    pub fn report(&self, z: f64) -> f64 {
        match self.scale {
            ErrorScale::Linear => z,
            ErrorScale::Log { offset } => z.ln() + offset,
        }
    }

    /// Delta-method variance on the reported scale.
    pub fn report_variance(&self, z: f64, variance: f64) -> f64 {
        match self.scale {
            ErrorScale::Linear => variance,
            ErrorScale::Log { .. } => variance / (z * z),
        }
    }
}

fn trapezoid_weights(lo: f64, hi: f64, res: usize) -> (Vec<f64>, Vec<f64>) {
    let h = (hi - lo) / (res - 1) as f64;
    let nodes = (0..res).map(|i| lo + h * i as f64).collect();
    let weights = (0..res)
        .map(|i| if i == 0 || i == res - 1 { 0.5 * h } else { h })
        .collect();
    (nodes, weights)
}

/// Tensor trapezoid rule for `f` on `[lo, hi]²`.
pub fn trapezoid_2d(f: impl Fn(f64, f64) -> f64, lo: f64, hi: f64, res: usize) -> f64 {
    let (nodes, w) = trapezoid_weights(lo, hi, res);
    let mut total = 0.0;
    for (a, wa) in nodes.iter().zip(&w) {
        for (b, wb) in nodes.iter().zip(&w) {
            total += wa * wb * f(*a, *b);
        }
    }
    total
}

/// Trapezoid rule for `f` on `[lo, hi]`.
pub fn trapezoid_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64, res: usize) -> f64 {
    let (nodes, w) = trapezoid_weights(lo, hi, res);
    nodes.iter().zip(&w).map(|(x, wx)| wx * f(*x)).sum()
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn refined(res: usize) -> usize {
    2 * res - 1
}

fn check_resolution(res: usize) -> Result<()> {
    if res < 3 {
        return Err(Error::argument("grid resolution must be at least 3"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// in-model

pub const INMODEL_POINTS: usize = 300;
pub const INMODEL_BOX: f64 = 3.0;
pub const INMODEL_GRID_HALF_WIDTH: f64 = 6.0;

/// `ℓ(x) = ½g(x)²` with `g` the interpolant of a GP prior draw.
pub struct InModelIntegrand {
    g: GpModel,
}

impl InModelIntegrand {
    pub fn g_model(&self) -> &GpModel {
        &self.g
    }

    /// Integral of `ℓ·N(0, I)` over `[−h, h]²` by the trapezoid rule.
    ///
    /// The SE kernel factorises over coordinates, so `g` on the whole grid
    /// is `A·diag(w)·Bᵀ` with one-dimensional kernel matrices `A`, `B`.
    pub fn grid_integral(&self, half_width: f64, res: usize) -> f64 {
        let (nodes, w) = trapezoid_weights(-half_width, half_width, res);
        let params = self.g.params();
        let inv = 0.5 / (params.lengthscale * params.lengthscale);
        let xs = self.g.inputs();
        let n = xs.len();
        let axis = |c: usize| DMatrix::from_fn(res, n, |a, i| (-(nodes[a] - xs[i][c]).powi(2) * inv).exp());
        let a = axis(0);
        let mut b = axis(1);
        for i in 0..n {
            let s = self.g.weights()[i] * params.variance();
            b.column_mut(i).scale_mut(s);
        }
        let grid = a * b.transpose();
        let phi: Vec<f64> = nodes.iter().map(|u| (-0.5 * u * u).exp() / (2.0 * PI).sqrt()).collect();
        let mut total = 0.0;
        for i in 0..res {
            for j in 0..res {
                let g = grid[(i, j)];
                total += w[i] * w[j] * phi[i] * phi[j] * 0.5 * g * g;
            }
        }
        total
    }
}

impl Integrand for InModelIntegrand {
    fn dim(&self) -> usize {
        2
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        let m = self.g.posterior(x).map(|(m, _)| m).unwrap_or(f64::NAN);
        0.5 * m * m
    }
}

pub fn gen_inmodel_problem(seed: u64, grid_res: usize) -> Result<Problem> {
    check_resolution(grid_res)?;
    let mut rng = rng_for(seed, &[0x494e_4d4f]);
    let lo = [-INMODEL_BOX; 2];
    let hi = [INMODEL_BOX; 2];
    let points: Vec<Point> = (0..INMODEL_POINTS).map(|_| uniform_in_box(&mut rng, &lo, &hi)).collect();
    let params = KernelParams::new(1.0, 1.0)?;
    let values = sample_gp_prior(&params, &points, derive_seed(seed, &[0x4744]))?;
    let g = fit_gp(&points, &values, params, BASE_RELATIVE_JITTER)?;
    let integrand = InModelIntegrand { g };
    let coarse = integrand.grid_integral(INMODEL_GRID_HALF_WIDTH, grid_res);
    let fine = integrand.grid_integral(INMODEL_GRID_HALF_WIDTH, refined(grid_res));
    if relative_gap(coarse, fine) >= TRUTH_TOLERANCE {
        return Err(Error::numerical(format!(
            "in-model grid truth not converged: {coarse} vs {fine}"
        )));
    }
    Ok(Problem {
        kind: ExperimentKind::InModel,
        integrand: Box::new(integrand),
        prior: GaussianMeasure::standard(2),
        truth: GroundTruth {
            value: coarse,
            method: TruthMethod::Grid,
            resolution: Some(grid_res),
        },
        scale: ErrorScale::Linear,
    })
}

// ---------------------------------------------------------------------------
// Gaussian mixture

/// `ℓ(x) = Σ wᵢ·N(x; μᵢ, σᵢ²I)`.
#[derive(Debug, Clone)]
pub struct MixtureIntegrand {
    means: Vec<Point>,
    variances: Vec<f64>,
    weights: Vec<f64>,
}

impl MixtureIntegrand {
    pub fn new(means: Vec<Point>, variances: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != variances.len() || means.len() != weights.len() {
            return Err(Error::argument("mixture components must have matching lengths"));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::argument("mixture means must share a positive dimension"));
        }
        if variances.iter().any(|v| !(*v > 0.0)) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::argument("variances must be positive and weights non-negative"));
        }
        Ok(Self { means, variances, weights })
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn means(&self) -> &[Point] {
        &self.means
    }

    fn iso_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
        let d = x.len() as f64;
        (-0.5 * sq_dist(x, mean) / var).exp() / (2.0 * PI * var).powf(0.5 * d)
    }

    /// `Σ wᵢ·N(μᵢ; m, (σᵢ² + s²)I)` for the measure `N(m, s²I)`.
    pub fn analytic_integral(&self, prior_mean: &[f64], prior_variance: f64) -> f64 {
        self.means
            .iter()
            .zip(&self.variances)
            .zip(&self.weights)
            .map(|((mu, v), w)| w * Self::iso_density(mu, prior_mean, v + prior_variance))
            .sum()
    }

    /// Independent check: each component's integral factorises into 1-D
    /// integrals, done here by the trapezoid rule.
    pub fn factorised_quadrature(&self, prior_mean: &[f64], prior_variance: f64) -> f64 {
        let prior_sd = prior_variance.sqrt();
        let mut total = 0.0;
        for ((mu, v), w) in self.means.iter().zip(&self.variances).zip(&self.weights) {
            let sd = v.sqrt();
            let comp = Normal::new(0.0, sd).expect("positive sd");
            let mut prod = 1.0;
            for (c, m) in mu.iter().zip(prior_mean) {
                let half = 12.0 * sd.max(prior_sd);
                let centre = 0.5 * (c + m);
                let pri = Normal::new(*m, prior_sd).expect("positive sd");
                prod *= trapezoid_1d(|x| comp.pdf(x - c) * pri.pdf(x), centre - half, centre + half, 4001);
            }
            total += w * prod;
        }
        total
    }
}

impl Integrand for MixtureIntegrand {
    fn dim(&self) -> usize {
        self.means[0].len()
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        self.means
            .iter()
            .zip(&self.variances)
            .zip(&self.weights)
            .map(|((mu, v), w)| w * Self::iso_density(x, mu, *v))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct MixtureOptions {
    pub dim: usize,
    pub min_components: usize,
    pub max_components: usize,
    pub variance_range: (f64, f64),
    pub mean_box: f64,
    pub prior_sd: f64,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        Self {
            dim: 4,
            min_components: 10,
            max_components: 15,
            variance_range: (1.0, 4.0),
            mean_box: 3.0,
            prior_sd: 2.0,
        }
    }
}

pub fn random_mixture(seed: u64, opts: &MixtureOptions) -> Result<MixtureIntegrand> {
    let mut rng = rng_for(seed, &[0x4d49_5854]);
    let k = rng.gen_range(opts.min_components..=opts.max_components);
    let (vlo, vhi) = opts.variance_range;
    let lo = vec![-opts.mean_box; opts.dim];
    let hi = vec![opts.mean_box; opts.dim];
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for _ in 0..k {
        variances.push(rng.gen_range(vlo..=vhi));
        means.push(uniform_in_box(&mut rng, &lo, &hi));
    }
    MixtureIntegrand::new(means, variances, vec![1.0 / k as f64; k])
}

pub fn gen_mixture_problem(seed: u64) -> Result<Problem> {
    gen_mixture_problem_with(seed, &MixtureOptions::default())
}

pub fn gen_mixture_problem_with(seed: u64, opts: &MixtureOptions) -> Result<Problem> {
    let mixture = random_mixture(seed, opts)?;
    let prior_var = opts.prior_sd * opts.prior_sd;
    let origin = vec![0.0; opts.dim];
    let z = mixture.analytic_integral(&origin, prior_var);
    let check = mixture.factorised_quadrature(&origin, prior_var);
    if relative_gap(z, check) >= TRUTH_TOLERANCE {
        return Err(Error::numerical(format!("mixture truth failed cross-check: {z} vs {check}")));
    }
    Ok(Problem {
        kind: ExperimentKind::Mixture,
        integrand: Box::new(mixture),
        prior: GaussianMeasure::isotropic(origin, prior_var)?,
        truth: GroundTruth {
            value: z,
            method: TruthMethod::Analytic,
            resolution: None,
        },
        scale: ErrorScale::Linear,
    })
}

// ---------------------------------------------------------------------------
// GP model evidence on Branin data

/// The Branin-Hoo function.
pub fn branin(x: &[f64]) -> f64 {
    let a = 1.0;
    let b = 5.1 / (4.0 * PI * PI);
    let c = 5.0 / PI;
    let r = 6.0;
    let s = 10.0;
    let t = 1.0 / (8.0 * PI);
    a * (x[1] - b * x[0] * x[0] + c * x[0] - r).powi(2) + s * (1.0 - t) * x[0].cos() + s
}

pub const BRANIN_LO: [f64; 2] = [-5.0, 0.0];
pub const BRANIN_HI: [f64; 2] = [10.0, 15.0];
pub const BO_INITIAL: usize = 5;
pub const BO_TOTAL: usize = 20;
const BO_CANDIDATES: usize = 2000;
const BO_LENGTHSCALE: f64 = 2.0;

fn expected_improvement(best: f64, mean: f64, sd: f64, normal: &Normal) -> f64 {
    if sd <= 0.0 {
        return (best - mean).max(0.0);
    }
    let z = (best - mean) / sd;
    (best - mean) * normal.cdf(z) + sd * normal.pdf(z)
}

/// Twenty Branin evaluations from a short expected-improvement loop.
pub fn branin_bo_dataset(seed: u64) -> Result<(Vec<Point>, Vec<f64>)> {
    let mut rng = rng_for(seed, &[0x4252_414e]);
    let mut xs: Vec<Point> = (0..BO_INITIAL)
        .map(|_| uniform_in_box(&mut rng, &BRANIN_LO, &BRANIN_HI))
        .collect();
    let mut ys: Vec<f64> = xs.iter().map(|x| branin(x)).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    while xs.len() < BO_TOTAL {
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt().max(1e-6);
        let centred: Vec<f64> = ys.iter().map(|y| y - mean).collect();
        let gp = fit_gp(&xs, &centred, KernelParams::new(sd, BO_LENGTHSCALE)?, BASE_RELATIVE_JITTER * sd * sd)?;
        let best = centred.iter().copied().fold(f64::INFINITY, f64::min);
        let cands: Vec<Point> = (0..BO_CANDIDATES)
            .map(|_| uniform_in_box(&mut rng, &BRANIN_LO, &BRANIN_HI))
            .collect();
        let post = gp.predict_with_gradients(&cands);
        let (k, _) = post
            .iter()
            .map(|p| expected_improvement(best, p.mean, p.variance.sqrt(), &normal))
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        let mut next = cands[k].clone();
        while xs.iter().any(|x| sq_dist(x, &next) < 1e-18) {
            next = uniform_in_box(&mut rng, &BRANIN_LO, &BRANIN_HI);
        }
        ys.push(branin(&next));
        xs.push(next);
    }
    Ok((xs, ys))
}

/// Nugget of the evidence GP, relative to `σ²`.
pub const EVIDENCE_NUGGET: f64 = 1e-6;
pub const EVIDENCE_GRID_HALF_WIDTH: f64 = 4.0;

/// `θ = (log λ, log σ) ↦ exp(log p(y | θ) − offset)` for a fixed dataset.
pub struct EvidenceIntegrand {
    inputs: Vec<Point>,
    targets: Vec<f64>,
    offset: f64,
}

impl EvidenceIntegrand {
    /// Standardises the targets before use.
    pub fn new(inputs: Vec<Point>, raw_targets: &[f64]) -> Self {
        let n = raw_targets.len() as f64;
        let mean = raw_targets.iter().sum::<f64>() / n;
        let sd = (raw_targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        Self {
            inputs,
            targets: raw_targets.iter().map(|y| (y - mean) / sd).collect(),
            offset: 0.0,
        }
    }

    pub fn log_marginal_likelihood(&self, theta: &[f64]) -> f64 {
        let params = KernelParams::from_log(theta[1], theta[0]);
        fit_gp(&self.inputs, &self.targets, params, EVIDENCE_NUGGET * params.variance())
            .and_then(|m| m.log_marginal_likelihood())
            .unwrap_or(f64::NEG_INFINITY)
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// `log Z` over `[−h, h]²` against `prior` by the trapezoid rule, in
    /// log-sum-exp form. Also returns the largest log integrand on the grid.
    pub fn grid_log_evidence(&self, prior: &GaussianMeasure, half_width: f64, res: usize) -> (f64, f64) {
        let (nodes, w) = trapezoid_weights(-half_width, half_width, res);
        let mut logs = Vec::with_capacity(res * res);
        for (a, wa) in nodes.iter().zip(&w) {
            for (b, wb) in nodes.iter().zip(&w) {
                let th = [*a, *b];
                logs.push(self.log_marginal_likelihood(&th) + prior.log_density(&th) + (wa * wb).ln());
            }
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
        let max_lml = nodes
            .iter()
            .flat_map(|a| nodes.iter().map(move |b| [*a, *b]))
            .map(|th| self.log_marginal_likelihood(&th))
            .fold(f64::NEG_INFINITY, f64::max);
        (max + sum.ln(), max_lml)
    }
}

impl Integrand for EvidenceIntegrand {
    fn dim(&self) -> usize {
        2
    }
    fn evaluate(&self, theta: &[f64]) -> f64 {
        (self.log_marginal_likelihood(theta) - self.offset).exp()
    }
}

pub fn gen_evidence_problem(seed: u64, grid_res: usize) -> Result<Problem> {
    check_resolution(grid_res)?;
    let (xs, ys) = branin_bo_dataset(seed)?;
    let mut integrand = EvidenceIntegrand::new(xs, &ys);
    let prior = GaussianMeasure::standard(2);
    let (log_z, max_lml) = integrand.grid_log_evidence(&prior, EVIDENCE_GRID_HALF_WIDTH, grid_res);
    let (log_z_fine, _) = integrand.grid_log_evidence(&prior, EVIDENCE_GRID_HALF_WIDTH, refined(grid_res));
    if !log_z.is_finite() || (log_z - log_z_fine).abs() >= TRUTH_TOLERANCE * log_z_fine.abs().max(1.0) {
        return Err(Error::numerical(format!(
            "evidence grid truth not converged: {log_z} vs {log_z_fine}"
        )));
    }
    integrand.offset = max_lml;
    Ok(Problem {
        kind: ExperimentKind::Evidence,
        integrand: Box::new(integrand),
        prior,
        truth: GroundTruth {
            value: log_z,
            method: TruthMethod::Grid,
            resolution: Some(grid_res),
        },
        scale: ErrorScale::Log { offset: max_lml },
    })
}

pub fn gen_problem(kind: ExperimentKind, seed: u64, grid_res: usize, mixture: &MixtureOptions) -> Result<Problem> {
    match kind {
        ExperimentKind::InModel => gen_inmodel_problem(seed, grid_res),
        ExperimentKind::Mixture => gen_mixture_problem_with(seed, mixture),
        ExperimentKind::Evidence => gen_evidence_problem(seed, grid_res),
    }
}
