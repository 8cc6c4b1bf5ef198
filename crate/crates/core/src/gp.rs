//! Gaussian process regression with an isotropic squared-exponential kernel.
//!
//! Observations are treated as noiseless; the only diagonal term added to the
//! Gram matrix is numerical jitter, escalated by factors of ten when the
//! Cholesky factorisation fails.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{rng_for, standard_normal_vec, Rng};
use crate::{sq_dist, Point};

/// Jitter used when escalation starts from zero, relative to `σ²`.
pub const BASE_RELATIVE_JITTER: f64 = 1e-10;
/// Maximum number of tenfold jitter increases before giving up.
pub const MAX_JITTER_ESCALATIONS: usize = 6;
/// Box for log-hyperparameters during marginal-likelihood search.
pub const LOG_PARAM_BOUNDS: (f64, f64) = (-5.0, 5.0);

/// Signal standard deviation and isotropic lengthscale of the SE kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub output_scale: f64,
    pub lengthscale: f64,
}

impl KernelParams {
    pub fn new(output_scale: f64, lengthscale: f64) -> Result<Self> {
        if !(output_scale > 0.0 && output_scale.is_finite()) {
            return Err(Error::argument(format!("output_scale must be positive, got {output_scale}")));
        }
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::argument(format!("lengthscale must be positive, got {lengthscale}")));
        }
        Ok(Self { output_scale, lengthscale })
    }

    pub fn from_log(log_output_scale: f64, log_lengthscale: f64) -> Self {
        Self {
            output_scale: log_output_scale.exp(),
            lengthscale: log_lengthscale.exp(),
        }
    }

    /// `σ²`, the prior variance at every point.
    pub fn variance(&self) -> f64 {
        self.output_scale * self.output_scale
    }

    #[inline]
    pub(crate) fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        self.variance() * (-0.5 * sq_dist(a, b) / (self.lengthscale * self.lengthscale)).exp()
    }
}

/// `σ²·exp(−‖x−x2‖²/(2λ²))`.
pub fn se_kernel(x: &[f64], x2: &[f64], params: &KernelParams) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::argument(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            x2.len()
        )));
    }
    Ok(params.eval(x, x2))
}

pub(crate) fn gram(points: &[Point], params: &KernelParams) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    let s2 = params.variance();
    for i in 0..n {
        k[(i, i)] = s2;
        for j in 0..i {
            let v = params.eval(&points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factorises `gram + jitter·I`, escalating the jitter on failure.
///
/// A zero starting jitter is tried as-is first, after which escalation starts
/// from `BASE_RELATIVE_JITTER·σ²`.
pub(crate) fn factorise_with_jitter(
    gram: &DMatrix<f64>,
    variance: f64,
    jitter: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = gram.nrows();
    let mut current = jitter;
    for attempt in 0..=MAX_JITTER_ESCALATIONS {
        let mut k = gram.clone();
        for i in 0..n {
            k[(i, i)] += current;
        }
        if let Some(chol) = k.cholesky() {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok((chol, current));
            }
        }
        if attempt == MAX_JITTER_ESCALATIONS {
            break;
        }
        current = (current * 10.0).max(BASE_RELATIVE_JITTER * variance);
    }
    Err(Error::NotPositiveDefinite { jitter: current })
}

/// Gaussian integration measure `N(mean, covariance)`.
#[derive(Debug, Clone)]
pub struct GaussianMeasure {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::argument("measure dimension must be at least 1"));
        }
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::argument("covariance shape does not match mean"));
        }
        let asym = (&covariance - covariance.transpose()).abs().max();
        if asym > 1e-12 * covariance.abs().max().max(1.0) {
            return Err(Error::argument("covariance is not symmetric"));
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::argument("covariance is not positive definite"))?;
        Ok(Self {
            mean: DVector::from_vec(mean),
            chol_lower: chol.l(),
            covariance,
        })
    }

    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        if variances.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::argument("diagonal covariance entries must be positive"));
        }
        Self::new(mean, DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::diagonal(mean, &vec![variance; d])
    }

    pub fn standard(d: usize) -> Self {
        Self::isotropic(vec![0.0; d], 1.0).expect("unit measure is valid")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn sample(&self, rng: &mut Rng) -> Point {
        let z = DVector::from_vec(standard_normal_vec(rng, self.dim()));
        (&self.mean + &self.chol_lower * z).iter().copied().collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let diff = DVector::from_column_slice(x) - &self.mean;
        let z = self
            .chol_lower
            .solve_lower_triangular(&diff)
            .expect("factor has positive diagonal");
        let log_det: f64 = self.chol_lower.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        -0.5 * (z.norm_squared() + log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }
}

/// Posterior moments at a list of points, including cross-covariances.
#[derive(Debug, Clone)]
pub struct BatchPosterior {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

/// Posterior mean and variance with their spatial gradients at one point.
#[derive(Debug, Clone)]
pub struct PointPrediction {
    pub mean: f64,
    pub variance: f64,
    pub mean_grad: Vec<f64>,
    pub variance_grad: Vec<f64>,
}

/// A fitted, immutable noiseless GP.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Point>,
    targets: Vec<f64>,
    params: KernelParams,
    jitter: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    weights: DVector<f64>,
}

/// Fits a GP to `(inputs, targets)`; see [`GpModel::fit`].
pub fn fit_gp(inputs: &[Point], targets: &[f64], params: KernelParams, jitter: f64) -> Result<GpModel> {
    GpModel::fit(inputs.to_vec(), targets.to_vec(), params, jitter)
}

impl GpModel {
    pub fn fit(inputs: Vec<Point>, targets: Vec<f64>, params: KernelParams, jitter: f64) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::argument(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if let Some(first) = inputs.first() {
            let d = first.len();
            if inputs.iter().any(|p| p.len() != d) {
                return Err(Error::argument("inputs have inconsistent dimensions"));
            }
        }
        if !(jitter >= 0.0) {
            return Err(Error::argument("jitter must be non-negative"));
        }
        if inputs.is_empty() {
            return Ok(Self {
                inputs,
                targets,
                params,
                jitter,
                chol: None,
                weights: DVector::zeros(0),
            });
        }
        let k = gram(&inputs, &params);
        let (chol, jitter) = factorise_with_jitter(&k, params.variance(), jitter)?;
        let weights = chol.solve(&DVector::from_column_slice(&targets));
        Ok(Self {
            inputs,
            targets,
            params,
            jitter,
            chol: Some(chol),
            weights,
        })
    }

    /// Refits with one extra observation (full refactorisation).
    pub fn with_observation(&self, x: Point, y: f64) -> Result<Self> {
        let mut inputs = self.inputs.clone();
        let mut targets = self.targets.clone();
        inputs.push(x);
        targets.push(y);
        Self::fit(inputs, targets, self.params, self.jitter)
    }

    pub fn inputs(&self) -> &[Point] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Jitter actually used, after any escalation.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.inputs.first().map(Vec::len)
    }

    /// `K⁻¹y`.
    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub(crate) fn cholesky(&self) -> Option<&Cholesky<f64, Dyn>> {
        self.chol.as_ref()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        match self.dim() {
            Some(d) if d != x.len() => Err(Error::argument(format!(
                "point has dimension {} but model has {}",
                x.len(),
                d
            ))),
            _ => Ok(()),
        }
    }

    /// Cross-kernel matrix `k(X, points)`, n × m.
    pub(crate) fn cross_kernel(&self, points: &[Point]) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), points.len(), |i, j| {
            self.params.eval(&self.inputs[i], &points[j])
        })
    }

    /// `(m(x), C(x,x))`, variance clamped at zero.
    pub fn posterior(&self, x: &[f64]) -> Result<(f64, f64)> {
        self.check_dim(x)?;
        let Some(chol) = &self.chol else {
            return Ok((0.0, self.params.variance()));
        };
        let kx = DVector::from_fn(self.len(), |i, _| self.params.eval(&self.inputs[i], x));
        let mean = kx.dot(&self.weights);
        let v = chol
            .l_dirty()
            .solve_lower_triangular(&kx)
            .expect("cholesky diagonal is positive");
        Ok((mean, (self.params.variance() - v.norm_squared()).max(0.0)))
    }

    /// Joint posterior over `points`: means and full cross-covariance.
    pub fn posterior_batch(&self, points: &[Point]) -> Result<BatchPosterior> {
        for p in points {
            self.check_dim(p)?;
        }
        let m = points.len();
        let prior = gram(points, &self.params);
        let Some(chol) = &self.chol else {
            return Ok(BatchPosterior {
                mean: vec![0.0; m],
                covariance: prior,
            });
        };
        let ks = self.cross_kernel(points);
        let mean = (ks.transpose() * &self.weights).iter().copied().collect();
        let v = chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("cholesky diagonal is positive");
        let mut covariance = prior - v.transpose() * v;
        for i in 0..m {
            covariance[(i, i)] = covariance[(i, i)].max(0.0);
        }
        Ok(BatchPosterior { mean, covariance })
    }

    /// Gradient of the posterior mean with respect to `x`.
    pub fn posterior_mean_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let d = x.len();
        let mut grad = vec![0.0; d];
        let inv_l2 = 1.0 / (self.params.lengthscale * self.params.lengthscale);
        for (xi, wi) in self.inputs.iter().zip(self.weights.iter()) {
            let k = self.params.eval(x, xi);
            for a in 0..d {
                grad[a] -= wi * (x[a] - xi[a]) * inv_l2 * k;
            }
        }
        Ok(grad)
    }

    /// Posterior mean, variance and both gradients at many points, with
    /// a single pair of triangular solves for the whole batch.
    pub fn predict_with_gradients(&self, points: &[Point]) -> Vec<PointPrediction> {
        let m = points.len();
        let d = points.first().map_or(0, Vec::len);
        let s2 = self.params.variance();
        let Some(chol) = &self.chol else {
            return (0..m)
                .map(|_| PointPrediction {
                    mean: 0.0,
                    variance: s2,
                    mean_grad: vec![0.0; d],
                    variance_grad: vec![0.0; d],
                })
                .collect();
        };
        let inv_l2 = 1.0 / (self.params.lengthscale * self.params.lengthscale);
        let ks = self.cross_kernel(points);
        let v = chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .expect("cholesky diagonal is positive");
        let a = chol
            .l_dirty()
            .tr_solve_lower_triangular(&v)
            .expect("cholesky diagonal is positive");
        (0..m)
            .map(|j| {
                let x = &points[j];
                let kcol = ks.column(j);
                let mean = kcol.dot(&self.weights);
                let variance = (s2 - v.column(j).norm_squared()).max(0.0);
                let mut mean_grad = vec![0.0; d];
                let mut variance_grad = vec![0.0; d];
                for (i, xi) in self.inputs.iter().enumerate() {
                    let kij = kcol[i] * inv_l2;
                    let wm = self.weights[i] * kij;
                    let wv = 2.0 * a[(i, j)] * kij;
                    for c in 0..d {
                        let diff = x[c] - xi[c];
                        mean_grad[c] -= wm * diff;
                        variance_grad[c] += wv * diff;
                    }
                }
                PointPrediction {
                    mean,
                    variance,
                    mean_grad,
                    variance_grad,
                }
            })
            .collect()
    }

    /// `−½yᵀK⁻¹y − Σ log Lᵢᵢ − (n/2) log 2π` with the jittered Gram matrix.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let chol = self
            .chol
            .as_ref()
            .ok_or_else(|| Error::argument("log marginal likelihood of an empty model"))?;
        let y = DVector::from_column_slice(&self.targets);
        let n = self.len() as f64;
        let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        Ok(-0.5 * y.dot(&self.weights) - log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Result of a marginal-likelihood hyperparameter search.
#[derive(Debug, Clone, Copy)]
pub struct HyperFit {
    pub params: KernelParams,
    pub log_likelihood: f64,
    /// False when no local search improved on its starting value; `params`
    /// is then the best starting point.
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct HyperOptions {
    pub restarts: usize,
    pub seed: u64,
    /// Extra starting point, typically the previous fit.
    pub warm_start: Option<KernelParams>,
    /// Jitter relative to `σ²`.
    pub relative_jitter: f64,
}

impl Default for HyperOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            seed: 0,
            warm_start: None,
            relative_jitter: BASE_RELATIVE_JITTER,
        }
    }
}

/// Marginal likelihood with the output scale profiled out.
///
/// With jitter proportional to `σ²`, `K = σ²R` where `R` depends only on the
/// lengthscale, and the likelihood is maximised in `σ` at `σ² = yᵀR⁻¹y / n`.
struct ProfiledLikelihood<'a> {
    inputs: &'a [Point],
    targets: DVector<f64>,
    relative_jitter: f64,
}

impl ProfiledLikelihood<'_> {
    fn correlation(&self, log_lengthscale: f64) -> DMatrix<f64> {
        gram(self.inputs, &KernelParams::from_log(0.0, log_lengthscale))
    }

    /// Log likelihood at `(log σ, log λ)`.
    fn at(&self, log_output_scale: f64, log_lengthscale: f64) -> f64 {
        match self.factor(log_lengthscale) {
            Some((quad, log_det_half)) => self.value(quad, log_det_half, log_output_scale),
            None => f64::NEG_INFINITY,
        }
    }

    fn factor(&self, log_lengthscale: f64) -> Option<(f64, f64)> {
        let r = self.correlation(log_lengthscale);
        let (chol, _) = factorise_with_jitter(&r, 1.0, self.relative_jitter).ok()?;
        let z = chol
            .l_dirty()
            .solve_lower_triangular(&self.targets)
            .expect("cholesky diagonal is positive");
        let log_det_half = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        Some((z.norm_squared(), log_det_half))
    }

    fn value(&self, quad: f64, log_det_half: f64, log_output_scale: f64) -> f64 {
        let n = self.targets.len() as f64;
        let s2 = (2.0 * log_output_scale).exp();
        -0.5 * quad / s2 - log_det_half - n * log_output_scale - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    fn best_log_output_scale(&self, quad: f64) -> f64 {
        let n = self.targets.len() as f64;
        let s2 = quad / n;
        let (lo, hi) = LOG_PARAM_BOUNDS;
        if s2 > 0.0 {
            (0.5 * s2.ln()).clamp(lo, hi)
        } else {
            lo
        }
    }

    /// Returns `(log σ, log-likelihood)` at the best `σ` for this lengthscale.
    fn profile(&self, log_lengthscale: f64) -> (f64, f64) {
        match self.factor(log_lengthscale) {
            Some((quad, log_det_half)) => {
                let s = self.best_log_output_scale(quad);
                (s, self.value(quad, log_det_half, s))
            }
            None => (LOG_PARAM_BOUNDS.0, f64::NEG_INFINITY),
        }
    }
}

const GOLDEN: f64 = 0.618_033_988_749_895;

/// Local bounded 1-D maximisation: bracket by expanding steps, then
/// golden-section refinement.
fn maximise_bounded_1d(f: &mut impl FnMut(f64) -> f64, start: f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let mut b = start.clamp(lo, hi);
    let mut fb = f(b);
    let mut step = 0.5;
    let up = (b + step).min(hi);
    let down = (b - step).max(lo);
    let fu = if up > b { f(up) } else { f64::NEG_INFINITY };
    let fd = if down < b { f(down) } else { f64::NEG_INFINITY };
    let dir = if fu > fb && fu >= fd {
        1.0
    } else if fd > fb {
        -1.0
    } else {
        // already bracketed by [down, up]
        return golden(f, down, b, fb, up, tol);
    };
    let (mut a, mut next, mut fnext) = if dir > 0.0 { (b, up, fu) } else { (b, down, fd) };
    loop {
        if fnext <= fb {
            return golden(f, a.min(next), b, fb, a.max(next), tol);
        }
        a = b;
        b = next;
        fb = fnext;
        if (dir > 0.0 && b >= hi) || (dir < 0.0 && b <= lo) {
            return (b, fb);
        }
        step *= 2.0;
        next = (b + dir * step).clamp(lo, hi);
        fnext = f(next);
    }
}

fn golden(f: &mut impl FnMut(f64) -> f64, mut a: f64, mid: f64, fmid: f64, mut c: f64, tol: f64) -> (f64, f64) {
    let (mut best, mut fbest) = (mid, fmid);
    let mut x1 = c - GOLDEN * (c - a);
    let mut x2 = a + GOLDEN * (c - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while c - a > tol {
        if f1 >= f2 {
            c = x2;
            x2 = x1;
            f2 = f1;
            x1 = c - GOLDEN * (c - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + GOLDEN * (c - a);
            f2 = f(x2);
        }
    }
    for (x, fx) in [(x1, f1), (x2, f2)] {
        if fx > fbest {
            best = x;
            fbest = fx;
        }
    }
    (best, fbest)
}

/// Maximises the log marginal likelihood over `(log σ, log λ)` in
/// [`LOG_PARAM_BOUNDS`]², with `restarts` seeded uniform starting points.
/// The output-scale bounds apply to `σ / rms(y)`.
pub fn optimise_hyperparams(inputs: &[Point], targets: &[f64], restarts: usize, seed: u64) -> Result<HyperFit> {
    optimise_hyperparams_with(
        inputs,
        targets,
        &HyperOptions {
            restarts,
            seed,
            ..HyperOptions::default()
        },
    )
}

pub fn optimise_hyperparams_with(inputs: &[Point], targets: &[f64], opts: &HyperOptions) -> Result<HyperFit> {
    if inputs.len() < 2 {
        return Err(Error::argument("hyperparameter search needs at least two observations"));
    }
    if inputs.len() != targets.len() {
        return Err(Error::argument("inputs and targets differ in length"));
    }
    if opts.restarts == 0 && opts.warm_start.is_none() {
        return Err(Error::argument("need at least one restart"));
    }
    // search on RMS-normalised targets so the output-scale bounds are
    // relative to the data
    let rms = (targets.iter().map(|y| y * y).sum::<f64>() / targets.len() as f64).sqrt();
    let log_scale = if rms > 0.0 && rms.is_finite() { rms.ln() } else { 0.0 };
    let scale = log_scale.exp();
    let lik = ProfiledLikelihood {
        inputs,
        targets: DVector::from_iterator(targets.len(), targets.iter().map(|y| y / scale)),
        relative_jitter: opts.relative_jitter,
    };
    let (lo, hi) = LOG_PARAM_BOUNDS;
    let mut rng = rng_for(opts.seed, &[0x4859_5045]);
    let mut starts: Vec<(f64, f64)> = (0..opts.restarts)
        .map(|_| (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)))
        .collect();
    if let Some(w) = opts.warm_start {
        starts.push(((w.output_scale.ln() - log_scale).clamp(lo, hi), w.lengthscale.ln().clamp(lo, hi)));
    }

    let mut best_start: Option<(f64, f64, f64)> = None;
    let mut best: Option<(f64, f64, f64)> = None;
    let mut improved = false;
    for (s0, t0) in starts {
        let initial = lik.at(s0, t0);
        if best_start.is_none_or(|(_, _, v)| initial > v) {
            best_start = Some((s0, t0, initial));
        }
        let mut profiled = |t: f64| lik.profile(t).1;
        let (t, _) = maximise_bounded_1d(&mut profiled, t0, lo, hi, 1e-3);
        let (s, value) = lik.profile(t);
        if value > initial {
            improved = true;
        }
        if value.is_finite() && best.is_none_or(|(_, _, v)| value > v) {
            best = Some((s, t, value));
        }
    }
    let (s, t, value) = match (improved, best, best_start) {
        (true, Some(b), _) => b,
        (_, _, Some(b)) if b.2.is_finite() => b,
        _ => return Err(Error::numerical("marginal likelihood non-finite at every restart")),
    };
    Ok(HyperFit {
        params: KernelParams::from_log(s + log_scale, t),
        log_likelihood: value - targets.len() as f64 * log_scale,
        improved,
    })
}

/// One joint prior draw at `points`.
pub fn sample_gp_prior(params: &KernelParams, points: &[Point], seed: u64) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let k = gram(points, params);
    let (chol, _) = factorise_with_jitter(&k, params.variance(), BASE_RELATIVE_JITTER * params.variance())?;
    let mut rng = rng_for(seed, &[0x5052_494f]);
    let z = DVector::from_vec(standard_normal_vec(&mut rng, points.len()));
    Ok((chol.l_dirty().lower_triangle() * z).iter().copied().collect())
}
