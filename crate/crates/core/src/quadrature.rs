//! Kernel integrals against a Gaussian measure, vanilla Bayesian quadrature
//! moments, and the square-root warped (linearised) model.
//!
//! The warped model keeps a GP on `g = √(2(ℓ − α))`. Linearising
//! `ℓ = α + ½g²` around the GP mean gives an integrand posterior with mean
//! `α + ½m_g(x)²` and covariance `m_g(x) C_g(x,x') m_g(x')`, whose integral
//! mean is available in closed form.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::gp::{GaussianMeasure, GpModel, KernelParams};
use crate::optimise::{Objective, ValueGrad};
use crate::rng::rng_for;
use crate::{sq_dist, Point};

/// Posterior mean and variance of the integral `Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegralEstimate {
    pub mean: f64,
    pub variance: f64,
}

/// `α = min_fraction · min(ℓ)`, `gᵢ = √(2(ℓᵢ − α))`.
pub fn warp_targets(ell_values: &[f64], min_fraction: f64) -> Result<(f64, Vec<f64>)> {
    if ell_values.is_empty() {
        return Err(Error::argument("warping needs at least one value"));
    }
    if let Some(bad) = ell_values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::argument(format!("integrand values must be finite and non-negative, got {bad}")));
    }
    if !(0.0..=1.0).contains(&min_fraction) {
        return Err(Error::argument("min_fraction must lie in [0, 1]"));
    }
    let min = ell_values.iter().copied().fold(f64::INFINITY, f64::min);
    let alpha = min_fraction * min;
    let g = ell_values
        .iter()
        .map(|l| (2.0 * (l - alpha)).max(0.0).sqrt())
        .collect();
    Ok((alpha, g))
}

/// Cached factorisations for the closed-form kernel integrals of one
/// `(kernel, measure)` pair.
pub struct KernelIntegrals<'a> {
    params: KernelParams,
    prior: &'a GaussianMeasure,
    /// `λ²I + S`
    single: Cholesky<f64, Dyn>,
    /// `λ²/2·I + S`
    half: Cholesky<f64, Dyn>,
    /// `|I + S/λ²|^(−1/2)`
    single_det: f64,
    /// `|I + 2S/λ²|^(−1/2)`
    double_det: f64,
}

fn shifted(s: &DMatrix<f64>, diag: f64) -> Cholesky<f64, Dyn> {
    let mut m = s.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += diag;
    }
    m.cholesky().expect("positive definite shift of a covariance")
}

fn half_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    c.l_dirty().diagonal().iter().map(|v| v.ln()).sum()
}

impl<'a> KernelIntegrals<'a> {
    pub fn new(params: KernelParams, prior: &'a GaussianMeasure) -> Self {
        let l2 = params.lengthscale * params.lengthscale;
        let d = prior.dim() as f64;
        let s = prior.covariance();
        let single = shifted(s, l2);
        let half = shifted(s, 0.5 * l2);
        // |I + S/λ²| = |λ²I + S| / λ^(2d)
        let single_det = (0.5 * d * l2.ln() - half_log_det(&single)).exp();
        let double_det = (0.5 * d * (0.5 * l2).ln() - half_log_det(&half)).exp();
        Self {
            params,
            prior,
            single,
            half,
            single_det,
            double_det,
        }
    }

    fn quad_form(c: &Cholesky<f64, Dyn>, v: DVector<f64>) -> f64 {
        c.l_dirty()
            .solve_lower_triangular(&v)
            .expect("positive diagonal")
            .norm_squared()
    }

    /// `∫k(x,s)π(s)ds`.
    pub fn mean(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - self.prior.mean();
        self.params.variance() * self.single_det * (-0.5 * Self::quad_form(&self.single, diff)).exp()
    }

    /// `∬k(x,x')π(x)π(x')dxdx'`.
    pub fn double_mean(&self) -> f64 {
        self.params.variance() * self.double_det
    }

    /// `Γ(a,b) = ∫k(a,s)k(s,b)π(s)ds`.
    ///
    /// The product of the two kernels is `σ⁴exp(−‖a−b‖²/4λ²)` times an SE
    /// kernel in `s` centred at `(a+b)/2` with squared lengthscale `λ²/2`.
    pub fn product(&self, a: &[f64], b: &[f64]) -> f64 {
        let l2 = self.params.lengthscale * self.params.lengthscale;
        let centre = DVector::from_fn(a.len(), |i, _| 0.5 * (a[i] + b[i])) - self.prior.mean();
        let s2 = self.params.variance();
        s2 * s2
            * (-0.25 * sq_dist(a, b) / l2).exp()
            * self.double_det
            * (-0.5 * Self::quad_form(&self.half, centre)).exp()
    }

    pub fn mean_vector(&self, xs: &[Point]) -> DVector<f64> {
        DVector::from_iterator(xs.len(), xs.iter().map(|x| self.mean(x)))
    }

    pub fn product_matrix(&self, xs: &[Point]) -> DMatrix<f64> {
        let n = xs.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.product(&xs[i], &xs[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }
}

fn check_dim(prior: &GaussianMeasure, x: &[f64]) -> Result<()> {
    if x.len() != prior.dim() {
        return Err(Error::argument(format!(
            "point has dimension {} but measure has {}",
            x.len(),
            prior.dim()
        )));
    }
    Ok(())
}

/// Kernel mean `∫k(x,s)π(s)ds`.
pub fn kernel_prior_mean(params: &KernelParams, prior: &GaussianMeasure, x: &[f64]) -> Result<f64> {
    check_dim(prior, x)?;
    Ok(KernelIntegrals::new(*params, prior).mean(x))
}

/// Initial error `∬k(x,x')π(x)π(x')dxdx' = σ²|I + 2S/λ²|^(−1/2)`.
pub fn kernel_prior_double_mean(params: &KernelParams, prior: &GaussianMeasure) -> f64 {
    KernelIntegrals::new(*params, prior).double_mean()
}

/// `Γ(a,b) = ∫k(a,s)k(s,b)π(s)ds`.
pub fn kernel_product_integral(params: &KernelParams, prior: &GaussianMeasure, a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(prior, a)?;
    check_dim(prior, b)?;
    Ok(KernelIntegrals::new(*params, prior).product(a, b))
}

/// Integral moments of an unwarped GP: `zᵀK⁻¹y` and `∬k − zᵀK⁻¹z`.
pub fn vanilla_bq_moments(model: &GpModel, prior: &GaussianMeasure) -> Result<IntegralEstimate> {
    if let Some(d) = model.dim() {
        if d != prior.dim() {
            return Err(Error::argument("model and measure dimensions differ"));
        }
    }
    let ints = KernelIntegrals::new(*model.params(), prior);
    let Some(chol) = model.cholesky() else {
        return Ok(IntegralEstimate {
            mean: 0.0,
            variance: ints.double_mean(),
        });
    };
    let z = ints.mean_vector(model.inputs());
    let mean = z.dot(model.weights());
    let v = chol.l_dirty().solve_lower_triangular(&z).expect("positive diagonal");
    Ok(IntegralEstimate {
        mean,
        variance: (ints.double_mean() - v.norm_squared()).max(0.0),
    })
}

/// Square-root warped GP model of a non-negative integrand.
#[derive(Debug, Clone)]
pub struct WarpedModel {
    alpha: f64,
    g_model: GpModel,
}

impl WarpedModel {
    pub fn new(alpha: f64, g_model: GpModel) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::argument("warp offset must be finite and non-negative"));
        }
        Ok(Self { alpha, g_model })
    }

    /// Warps `ell_values` and fits the `g` GP with fixed hyperparameters.
    pub fn fit(inputs: Vec<Point>, ell_values: &[f64], min_fraction: f64, params: KernelParams, jitter: f64) -> Result<Self> {
        let (alpha, g) = warp_targets(ell_values, min_fraction)?;
        Self::new(alpha, GpModel::fit(inputs, g, params, jitter)?)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn g_model(&self) -> &GpModel {
        &self.g_model
    }

    pub fn dim(&self) -> Option<usize> {
        self.g_model.dim()
    }

    /// Conditions the `g` GP on `(x, g_value)` keeping `α` and hyperparameters.
    pub fn with_g_observation(&self, x: Point, g_value: f64) -> Result<Self> {
        Ok(Self {
            alpha: self.alpha,
            g_model: self.g_model.with_observation(x, g_value)?,
        })
    }

    /// Model-implied integrand mean `α + ½m_g(x)²`.
    pub fn integrand_mean(&self, x: &[f64]) -> Result<f64> {
        let (m, _) = self.g_model.posterior(x)?;
        Ok(self.alpha + 0.5 * m * m)
    }

    /// `E[Z] = α + ½wᵀΓw` with `w = K⁻¹g`.
    pub fn integral_mean(&self, prior: &GaussianMeasure) -> f64 {
        if self.g_model.is_empty() {
            return self.alpha;
        }
        let ints = KernelIntegrals::new(*self.g_model.params(), prior);
        let gamma = ints.product_matrix(self.g_model.inputs());
        let w = self.g_model.weights();
        self.alpha + 0.5 * w.dot(&(gamma * w)).max(0.0)
    }

    /// Monte Carlo estimate of `∬m_g(x)C_g(x,x')m_g(x')π(x)π(x')`, using all
    /// `n_samples²` pairs of `n_samples` seeded prior draws.
    pub fn integral_variance(&self, prior: &GaussianMeasure, n_samples: usize, seed: u64) -> f64 {
        if self.g_model.is_empty() || n_samples == 0 {
            return 0.0;
        }
        let mut rng = rng_for(seed, &[0x5641_5249]);
        let draws: Vec<Point> = (0..n_samples).map(|_| prior.sample(&mut rng)).collect();
        let params = self.g_model.params();
        let ks = self.g_model.cross_kernel(&draws);
        let m = ks.transpose() * self.g_model.weights();
        // mᵀK_SS m − ‖L⁻¹K_XS m‖²
        let mut prior_term = 0.0;
        for i in 0..n_samples {
            let mut row = 0.0;
            for j in 0..n_samples {
                row += params.eval(&draws[i], &draws[j]) * m[j];
            }
            prior_term += m[i] * row;
        }
        let chol = self.g_model.cholesky().expect("non-empty model is factorised");
        let reduced = chol
            .l_dirty()
            .solve_lower_triangular(&(&ks * &m))
            .expect("positive diagonal")
            .norm_squared();
        let n2 = (n_samples * n_samples) as f64;
        ((prior_term - reduced) / n2).max(0.0)
    }

    pub fn estimate(&self, prior: &GaussianMeasure, n_samples: usize, seed: u64) -> IntegralEstimate {
        IntegralEstimate {
            mean: self.integral_mean(prior),
            variance: self.integral_variance(prior, n_samples, seed),
        }
    }

    /// `m_g(x)²·C_g(x,x)` and its gradient.
    pub fn acquisition(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if let Some(d) = self.dim() {
            if d != x.len() {
                return Err(Error::argument("point dimension does not match model"));
            }
        }
        let e = WsabiAcquisition::new(self).evaluate_one(x);
        Ok((e.value, e.grad))
    }
}

pub fn wsabi_integral_mean(model: &WarpedModel, prior: &GaussianMeasure) -> f64 {
    model.integral_mean(prior)
}

pub fn wsabi_integral_variance(model: &WarpedModel, prior: &GaussianMeasure, n_samples: usize, seed: u64) -> f64 {
    model.integral_variance(prior, n_samples, seed)
}

/// Pointwise posterior variance of the linearised integrand, dropping
/// constant factors.
pub struct WsabiAcquisition<'a> {
    model: &'a WarpedModel,
    dim: usize,
}

impl<'a> WsabiAcquisition<'a> {
    pub fn new(model: &'a WarpedModel) -> Self {
        Self {
            model,
            dim: model.dim().unwrap_or(0),
        }
    }

    pub fn for_dim(model: &'a WarpedModel, dim: usize) -> Self {
        Self { model, dim }
    }
}

impl Objective for WsabiAcquisition<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, points: &[Point]) -> Vec<ValueGrad> {
        self.model
            .g_model
            .predict_with_gradients(points)
            .into_iter()
            .map(|p| {
                let m = p.mean;
                let v = p.variance;
                let grad = p
                    .mean_grad
                    .iter()
                    .zip(&p.variance_grad)
                    .map(|(gm, gv)| {
                        let gv = if v > 0.0 { *gv } else { 0.0 };
                        2.0 * m * v * gm + m * m * gv
                    })
                    .collect();
                ValueGrad { value: m * m * v, grad }
            })
            .collect()
    }
}
