//! Batch selection and the outer batch quadrature loop.
//!
//! Two ways of choosing `n` points per iteration from the warped model's
//! variance acquisition:
//!
//! * Kriging Believer: after each pick, condition the `g` GP on its own
//!   posterior mean at that point and maximise again.
//! * Local penalisation: after each pick, add a Lipschitz cone centred there
//!   and maximise the soft minimum of the acquisition and all cones.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::gp::{optimise_hyperparams_with, GaussianMeasure, GpModel, HyperOptions, KernelParams, BASE_RELATIVE_JITTER};
use crate::optimise::{maximise_with, MaximiseOptions, Objective, ValueGrad};
use crate::quadrature::{warp_targets, WarpedModel, WsabiAcquisition};
use crate::rng::{derive_seed, rng_for};
use crate::{sq_dist, Point};

pub const DEFAULT_SOFT_MIN_EXPONENT: i32 = -6;
pub const DEFAULT_SLOPE_FRACTION: f64 = 0.5;
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// A non-negative function to integrate.
pub trait Integrand: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> f64;
}

/// Wraps a closure as an [`Integrand`].
pub struct FnIntegrand<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnIntegrand<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> Integrand for FnIntegrand<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn evaluate(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

/// `C(x) = γ·L·‖x − x₀‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzCone {
    pub center: Point,
    pub lipschitz: f64,
    pub slope_fraction: f64,
}

impl LipschitzCone {
    pub fn slope(&self) -> f64 {
        self.slope_fraction * self.lipschitz
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.slope() * sq_dist(x, &self.center).sqrt()
    }

    /// Undefined at the centre, where zero is returned.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r = sq_dist(x, &self.center).sqrt();
        if r == 0.0 {
            return vec![0.0; x.len()];
        }
        let s = self.slope() / r;
        x.iter().zip(&self.center).map(|(a, c)| s * (a - c)).collect()
    }
}

/// Soft minimum `(Σ vᵢ^p)^(1/p)` of components floored at `floor`, with its
/// partial derivatives.
///
/// Computed as `m·(Σ (vᵢ/m)^p)^(1/p)` with `m` the smallest component. When
/// any component is at or below the floor the result is the floor itself with
/// zero partials.
pub fn soft_min(values: &[f64], p: i32, floor: f64) -> (f64, Vec<f64>) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > floor) {
        return (floor, vec![0.0; values.len()]);
    }
    let pf = f64::from(p);
    let sum: f64 = values.iter().map(|v| (v / min).powi(p)).sum();
    let value = min * sum.powf(1.0 / pf);
    let partials = values.iter().map(|v| (v / value).powi(p - 1)).collect();
    (value, partials)
}

/// Base acquisition soft-minimised against a set of Lipschitz cones.
pub struct PenalisedAcquisition<B> {
    base: B,
    cones: Vec<LipschitzCone>,
    p: i32,
    floor: f64,
    slope_fraction: f64,
}

impl<B: Objective> PenalisedAcquisition<B> {
    pub fn new(base: B, p: i32, floor: f64, slope_fraction: f64) -> Result<Self> {
        if p >= 0 || p % 2 != 0 {
            return Err(Error::argument(format!("soft-min exponent must be a negative even integer, got {p}")));
        }
        if !(floor > 0.0) {
            return Err(Error::argument("floor must be positive"));
        }
        if !(slope_fraction > 0.0 && slope_fraction <= 1.0) {
            return Err(Error::argument("slope fraction must lie in (0, 1]"));
        }
        Ok(Self {
            base,
            cones: Vec::new(),
            p,
            floor,
            slope_fraction,
        })
    }

    pub fn base(&self) -> &B {
        &self.base
    }

    pub fn cones(&self) -> &[LipschitzCone] {
        &self.cones
    }

    pub fn push_cone(&mut self, cone: LipschitzCone) {
        self.cones.push(cone);
    }

    /// Adds a cone at `x0` whose slope is the slope fraction times the local
    /// Lipschitz estimate of `acq_for_lipschitz`.
    pub fn add_penaliser<A: Objective + ?Sized>(
        &mut self,
        x0: Point,
        acq_for_lipschitz: &A,
        lengthscale: f64,
    ) -> Result<&LipschitzCone> {
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("cone centre must be finite"));
        }
        let mut lipschitz = estimate_local_lipschitz(acq_for_lipschitz, &x0, lengthscale);
        let scale = acq_for_lipschitz.evaluate_one(&x0).value.abs().max(self.floor);
        let min_slope = 1e-6 * scale / lengthscale;
        if self.slope_fraction * lipschitz < min_slope {
            lipschitz = min_slope / self.slope_fraction;
        }
        self.cones.push(LipschitzCone {
            center: x0,
            lipschitz,
            slope_fraction: self.slope_fraction,
        });
        Ok(self.cones.last().expect("just pushed"))
    }

    pub fn penalised_value(&self, x: &[f64]) -> ValueGrad {
        self.evaluate(&[x.to_vec()]).pop().expect("one result")
    }
}

impl<B: Objective> Objective for PenalisedAcquisition<B> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn evaluate(&self, points: &[Point]) -> Vec<ValueGrad> {
        let base = self.base.evaluate(points);
        if self.cones.is_empty() {
            return base;
        }
        points
            .iter()
            .zip(base)
            .map(|(x, b)| {
                let mut comps = Vec::with_capacity(self.cones.len() + 1);
                comps.push(b.value);
                comps.extend(self.cones.iter().map(|c| c.value(x)));
                let (value, partials) = soft_min(&comps, self.p, self.floor);
                let mut grad: Vec<f64> = b.grad.iter().map(|g| partials[0] * g).collect();
                for (cone, w) in self.cones.iter().zip(&partials[1..]) {
                    if *w != 0.0 {
                        for (gi, ci) in grad.iter_mut().zip(cone.gradient(x)) {
                            *gi += w * ci;
                        }
                    }
                }
                ValueGrad { value, grad }
            })
            .collect()
    }
}

const LIPSCHITZ_ITERS: usize = 30;
const LIPSCHITZ_STEP: f64 = 0.1;
const LIPSCHITZ_FD_STEP: f64 = 1e-4;

/// Largest gradient norm of `acq` found by a short projected ascent inside
/// the ball of radius `lengthscale` around `x0`.
///
/// The ascent direction comes from central differences of the gradient. Where
/// that direction is undefined (zero gradient at the current point, or a flat
/// gradient norm) the six coordinate neighbours are probed instead.
pub fn estimate_local_lipschitz<A: Objective + ?Sized>(acq: &A, x0: &[f64], lengthscale: f64) -> f64 {
    let d = x0.len();
    let step = LIPSCHITZ_STEP * lengthscale;
    let fd = LIPSCHITZ_FD_STEP * lengthscale;
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let project = |x: &mut Vec<f64>| {
        let r = sq_dist(x, x0).sqrt();
        if r > lengthscale {
            for (xi, ci) in x.iter_mut().zip(x0) {
                *xi = ci + (*xi - ci) * lengthscale / r;
            }
        }
    };

    let h0 = norm(&acq.evaluate_one(x0).grad);
    if !h0.is_finite() {
        return 0.0;
    }
    let mut best = h0;
    let mut x = x0.to_vec();
    for _ in 0..LIPSCHITZ_ITERS {
        let mut probes = vec![x.clone()];
        for a in 0..d {
            let mut p = x.clone();
            p[a] += fd;
            probes.push(p);
            let mut m = x.clone();
            m[a] -= fd;
            probes.push(m);
        }
        let evals = acq.evaluate(&probes);
        if evals.iter().any(|e| e.grad.iter().any(|v| !v.is_finite())) {
            break;
        }
        let g = &evals[0].grad;
        let h = norm(g);
        // ∇‖∇a‖ = Hᵀ∇a / ‖∇a‖ with H from central differences
        let mut dir = vec![0.0; d];
        if h > 0.0 {
            for a in 0..d {
                let col: f64 = (0..d)
                    .map(|b| (evals[1 + 2 * a].grad[b] - evals[2 + 2 * a].grad[b]) / (2.0 * fd) * g[b])
                    .sum();
                dir[a] = col / h;
            }
        }
        let dn = norm(&dir);
        let next = if dn > 0.0 && dn.is_finite() {
            let mut n: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di / dn).collect();
            project(&mut n);
            n
        } else {
            let mut cands = Vec::with_capacity(2 * d);
            for a in 0..d {
                for sgn in [1.0, -1.0] {
                    let mut c = x.clone();
                    c[a] += sgn * step;
                    project(&mut c);
                    cands.push(c);
                }
            }
            let hs: Vec<f64> = acq.evaluate(&cands).iter().map(|e| norm(&e.grad)).collect();
            let (k, hk) = hs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
            if !(hk > h) {
                break;
            }
            cands.swap_remove(k)
        };
        let hn = norm(&acq.evaluate_one(&next).grad);
        if !hn.is_finite() {
            break;
        }
        best = best.max(hn);
        if sq_dist(&next, &x) == 0.0 {
            break;
        }
        x = next;
    }
    best
}

/// How each batch is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BatchMethod {
    KrigingBeliever,
    LocalPenalisation,
}

impl BatchMethod {
    pub fn tag(self) -> &'static str {
        match self {
            BatchMethod::KrigingBeliever => "kb",
            BatchMethod::LocalPenalisation => "lp",
        }
    }
}

impl fmt::Display for BatchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for BatchMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kb" | "kriging-believer" => Ok(BatchMethod::KrigingBeliever),
            "lp" | "local-penalisation" => Ok(BatchMethod::LocalPenalisation),
            _ => Err(Error::argument(format!("unknown batch method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub method: BatchMethod,
    /// Total integrand evaluations, initial design included.
    pub budget: usize,
    pub min_fraction: f64,
    pub slope_fraction: f64,
    pub p: i32,
    pub floor: f64,
    pub seed: u64,
    pub initial_design: usize,
    pub hyper_restarts: usize,
    pub variance_samples: usize,
}

impl BatchConfig {
    pub fn new(method: BatchMethod, batch_size: usize, budget: usize, seed: u64) -> Self {
        Self {
            batch_size,
            method,
            budget,
            min_fraction: 0.8,
            slope_fraction: DEFAULT_SLOPE_FRACTION,
            p: DEFAULT_SOFT_MIN_EXPONENT,
            floor: DEFAULT_FLOOR,
            seed,
            initial_design: 3,
            hyper_restarts: 5,
            variance_samples: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::argument("batch size must be at least 1"));
        }
        if self.initial_design == 0 {
            return Err(Error::argument("initial design must contain at least one point"));
        }
        if self.budget < self.initial_design {
            return Err(Error::argument(format!(
                "budget {} is smaller than the initial design {}",
                self.budget, self.initial_design
            )));
        }
        if !(0.0..=1.0).contains(&self.min_fraction) {
            return Err(Error::argument("min_fraction must lie in [0, 1]"));
        }
        if !(self.slope_fraction > 0.0 && self.slope_fraction <= 1.0) {
            return Err(Error::argument("slope fraction must lie in (0, 1]"));
        }
        if self.p >= 0 || self.p % 2 != 0 {
            return Err(Error::argument("soft-min exponent must be a negative even integer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureRecord {
    pub batch_index: usize,
    pub n_evaluations: usize,
    pub estimate: f64,
    pub variance: f64,
    pub wallclock_ms: f64,
}

/// Per-batch convergence records plus every evaluation made.
#[derive(Debug, Clone, Default)]
pub struct QuadratureTrace {
    pub records: Vec<QuadratureRecord>,
    pub inputs: Vec<Point>,
    pub values: Vec<f64>,
}

const SEED_INIT: u64 = 1;
const SEED_HYPER: u64 = 2;
const SEED_SELECT: u64 = 3;
const SEED_VARIANCE: u64 = 4;

fn maximise_robust<O: Objective + ?Sized>(
    f: &O,
    prior: &GaussianMeasure,
    seed: u64,
    opts: &MaximiseOptions,
) -> Result<Point> {
    match maximise_with(f, prior, seed, opts) {
        Ok(m) if m.point.iter().all(|v| v.is_finite()) => Ok(m.point),
        _ => {
            let m = maximise_with(f, prior, derive_seed(seed, &[0xFFFF]), opts)?;
            if m.point.iter().all(|v| v.is_finite()) {
                Ok(m.point)
            } else {
                Err(Error::numerical("acquisition maximiser returned a non-finite point"))
            }
        }
    }
}

fn acquisition_options(model: &WarpedModel, avoid: Vec<Point>) -> MaximiseOptions {
    let l = model.g_model().params().lengthscale;
    MaximiseOptions {
        avoid,
        avoid_radius: 1e-9 * l,
        nudge: 1e-6 * l,
        ..MaximiseOptions::default()
    }
}

fn prior_dim(model: &WarpedModel, prior: &GaussianMeasure) -> Result<usize> {
    match model.dim() {
        Some(d) if d != prior.dim() => Err(Error::argument("model and prior dimensions differ")),
        _ => Ok(prior.dim()),
    }
}

/// Selects `n` points by local penalisation with Lipschitz cones.
pub fn select_batch_lp(model: &WarpedModel, prior: &GaussianMeasure, n: usize, cfg: &BatchConfig) -> Result<Vec<Point>> {
    if n == 0 {
        return Err(Error::argument("batch size must be at least 1"));
    }
    let d = prior_dim(model, prior)?;
    let lengthscale = model.g_model().params().lengthscale;
    let base = WsabiAcquisition::for_dim(model, d);
    let mut pa = PenalisedAcquisition::new(WsabiAcquisition::for_dim(model, d), cfg.p, cfg.floor, cfg.slope_fraction)?;
    let mut batch = Vec::with_capacity(n);
    for i in 0..n {
        let centres: Vec<Point> = pa.cones().iter().map(|c| c.center.clone()).collect();
        let opts = acquisition_options(model, centres);
        let x = maximise_robust(&pa, prior, derive_seed(cfg.seed, &[SEED_SELECT, i as u64]), &opts)?;
        if i + 1 < n {
            pa.add_penaliser(x.clone(), &base, lengthscale)?;
        }
        batch.push(x);
    }
    Ok(batch)
}

/// Selects `n` points by Kriging Believer, hallucinating in `g` space.
pub fn select_batch_kb(model: &WarpedModel, prior: &GaussianMeasure, n: usize, cfg: &BatchConfig) -> Result<Vec<Point>> {
    select_batch_kb_traced(model, prior, n, cfg).map(|(batch, _)| batch)
}

/// As [`select_batch_kb`], also returning the model after each
/// hallucination.
pub fn select_batch_kb_traced(
    model: &WarpedModel,
    prior: &GaussianMeasure,
    n: usize,
    cfg: &BatchConfig,
) -> Result<(Vec<Point>, Vec<WarpedModel>)> {
    if n == 0 {
        return Err(Error::argument("batch size must be at least 1"));
    }
    let d = prior_dim(model, prior)?;
    let mut current = model.clone();
    let mut batch = Vec::with_capacity(n);
    let mut models = Vec::with_capacity(n);
    for i in 0..n {
        let opts = acquisition_options(&current, Vec::new());
        let acq = WsabiAcquisition::for_dim(&current, d);
        let x = maximise_robust(&acq, prior, derive_seed(cfg.seed, &[SEED_SELECT, i as u64]), &opts)?;
        if i + 1 < n {
            let (mean, _) = current.g_model().posterior(&x)?;
            current = current.with_g_observation(x.clone(), mean)?;
            models.push(current.clone());
        }
        batch.push(x);
    }
    Ok((batch, models))
}

/// Warps, refits hyperparameters on the warped targets, and fits the `g` GP.
pub fn fit_warped_model(
    inputs: &[Point],
    values: &[f64],
    cfg: &BatchConfig,
    warm_start: Option<KernelParams>,
    seed: u64,
) -> Result<WarpedModel> {
    let (alpha, g) = warp_targets(values, cfg.min_fraction)?;
    let params = if inputs.len() >= 2 {
        optimise_hyperparams_with(
            inputs,
            &g,
            &HyperOptions {
                restarts: cfg.hyper_restarts,
                seed,
                warm_start,
                relative_jitter: BASE_RELATIVE_JITTER,
            },
        )?
        .params
    } else {
        warm_start.unwrap_or(KernelParams::new(g[0].abs().max(1e-3), 1.0)?)
    };
    let g_model = GpModel::fit(inputs.to_vec(), g, params, BASE_RELATIVE_JITTER * params.variance())?;
    WarpedModel::new(alpha, g_model)
}

fn evaluate_checked(f: &dyn Integrand, points: &[Point], batch_index: usize) -> Result<Vec<f64>> {
    points
        .iter()
        .map(|x| {
            let v = f.evaluate(x);
            if v.is_finite() && v >= 0.0 {
                Ok(v)
            } else {
                Err(Error::Integrand {
                    batch_index,
                    point: x.clone(),
                    value: v,
                })
            }
        })
        .collect()
}

/// Runs batch quadrature until the evaluation budget is spent.
///
/// Record 0 follows the initial design; each later record follows one batch.
/// A final batch that would overrun the budget is shortened to fit.
pub fn run_batch_bq(integrand: &dyn Integrand, prior: &GaussianMeasure, cfg: &BatchConfig) -> Result<QuadratureTrace> {
    cfg.validate()?;
    if integrand.dim() != prior.dim() {
        return Err(Error::argument("integrand and prior dimensions differ"));
    }
    let started = Instant::now();
    let mut rng = rng_for(cfg.seed, &[SEED_INIT]);
    let mut inputs: Vec<Point> = (0..cfg.initial_design).map(|_| prior.sample(&mut rng)).collect();
    let mut values = evaluate_checked(integrand, &inputs, 0)?;

    let mut model = fit_warped_model(&inputs, &values, cfg, None, derive_seed(cfg.seed, &[SEED_HYPER, 0]))?;
    let mut trace = QuadratureTrace::default();
    let est = model.estimate(prior, cfg.variance_samples, derive_seed(cfg.seed, &[SEED_VARIANCE, 0]));
    trace.records.push(QuadratureRecord {
        batch_index: 0,
        n_evaluations: inputs.len(),
        estimate: est.mean,
        variance: est.variance,
        wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
    });

    let mut batch_index = 0;
    while inputs.len() < cfg.budget {
        batch_index += 1;
        let n = cfg.batch_size.min(cfg.budget - inputs.len());
        let mut step_cfg = cfg.clone();
        step_cfg.seed = derive_seed(cfg.seed, &[batch_index as u64]);
        let batch = match cfg.method {
            BatchMethod::KrigingBeliever => select_batch_kb(&model, prior, n, &step_cfg)?,
            BatchMethod::LocalPenalisation => select_batch_lp(&model, prior, n, &step_cfg)?,
        };
        let new_values = evaluate_checked(integrand, &batch, batch_index)?;
        inputs.extend(batch);
        values.extend(new_values);
        model = fit_warped_model(
            &inputs,
            &values,
            cfg,
            Some(*model.g_model().params()),
            derive_seed(cfg.seed, &[SEED_HYPER, batch_index as u64]),
        )?;
        let est = model.estimate(
            prior,
            cfg.variance_samples,
            derive_seed(cfg.seed, &[SEED_VARIANCE, batch_index as u64]),
        );
        trace.records.push(QuadratureRecord {
            batch_index,
            n_evaluations: inputs.len(),
            estimate: est.mean,
            variance: est.variance,
            wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    trace.inputs = inputs;
    trace.values = values;
    Ok(trace)
}
