//! Multi-start maximisation.
//!
//! Starting points are drawn from the integration measure and advanced
//! together: every iteration evaluates the objective once on the stacked list
//! of all still-active points. Each block keeps its own quasi-Newton state and
//! its own backtracking step, so the stacked run reproduces what running the
//! local method from each start in turn would give.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::gp::GaussianMeasure;
use crate::rng::{rng_for, standard_normal_vec};
use crate::Point;

/// Objective value and gradient at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// A differentiable function evaluated on many points per call.
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&self, points: &[Point]) -> Vec<ValueGrad>;

    fn evaluate_one(&self, x: &[f64]) -> ValueGrad {
        self.evaluate(&[x.to_vec()]).pop().expect("one result per point")
    }
}

impl<T: Objective + ?Sized> Objective for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, points: &[Point]) -> Vec<ValueGrad> {
        (**self).evaluate(points)
    }
}

/// Adapts a pointwise closure returning `(value, gradient)`.
pub struct FnObjective<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> FnObjective<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn evaluate(&self, points: &[Point]) -> Vec<ValueGrad> {
        points
            .iter()
            .map(|p| {
                let (value, grad) = (self.f)(p);
                ValueGrad { value, grad }
            })
            .collect()
    }
}

/// Starting locations for the local optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct StartSet {
    points: Vec<Point>,
}

impl StartSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let d = points.first().map(Vec::len).ok_or_else(|| Error::argument("empty start set"))?;
        if points.iter().any(|p| p.len() != d || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::argument("start points must be finite and share a dimension"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

pub const STARTS_PER_DIMENSION: usize = 10;

/// `10·d` independent draws from the prior.
pub fn sample_starts(prior: &GaussianMeasure, d: usize, seed: u64) -> Result<StartSet> {
    if d == 0 {
        return Err(Error::argument("dimension must be at least 1"));
    }
    if d != prior.dim() {
        return Err(Error::argument("prior dimension does not match"));
    }
    sample_n_starts(prior, STARTS_PER_DIMENSION * d, seed)
}

pub fn sample_n_starts(prior: &GaussianMeasure, count: usize, seed: u64) -> Result<StartSet> {
    let mut rng = rng_for(seed, &[0x5354_4152]);
    StartSet::new((0..count).map(|_| prior.sample(&mut rng)).collect())
}

/// `g(x₁|…|xₙ) = f(x₁) + … + f(xₙ)` over the concatenation of the starts.
pub struct ConcatObjective<'a, O: ?Sized> {
    f: &'a O,
    block_dim: usize,
    blocks: usize,
}

pub fn concat_objective<'a, O: Objective + ?Sized>(f: &'a O, starts: &StartSet) -> Result<ConcatObjective<'a, O>> {
    if starts.dim() != f.dim() {
        return Err(Error::argument("start dimension does not match objective"));
    }
    Ok(ConcatObjective {
        f,
        block_dim: starts.dim(),
        blocks: starts.count(),
    })
}

impl<O: Objective + ?Sized> ConcatObjective<'_, O> {
    pub fn dim(&self) -> usize {
        self.block_dim * self.blocks
    }

    pub fn stack(points: &[Point]) -> Vec<f64> {
        points.iter().flatten().copied().collect()
    }

    pub fn split(&self, stacked: &[f64]) -> Vec<Point> {
        stacked.chunks(self.block_dim).map(<[f64]>::to_vec).collect()
    }

    /// Summed value and concatenated gradient, from one batched call of `f`.
    pub fn value_grad(&self, stacked: &[f64]) -> (f64, Vec<f64>) {
        assert_eq!(stacked.len(), self.dim(), "stacked point has wrong length");
        let evals = self.f.evaluate(&self.split(stacked));
        let value = evals.iter().map(|e| e.value).sum();
        let grad = evals.into_iter().flat_map(|e| e.grad).collect();
        (value, grad)
    }
}

/// Plain gradient ascent `x ← x + η∇f(x)` for a fixed number of steps.
pub fn fixed_step_ascent(f: impl Fn(&[f64]) -> (f64, Vec<f64>), x0: &[f64], step: f64, iters: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    for _ in 0..iters {
        let (_, g) = f(&x);
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += step * gi;
        }
    }
    x
}

#[derive(Debug, Clone)]
pub struct MaximiseOptions {
    pub max_iters: usize,
    /// Stop a block once its gradient norm falls below this.
    pub grad_tol: f64,
    /// Stop a block once an accepted step changes `f` by less than this
    /// fraction of `|f|`.
    pub rel_f_tol: f64,
    /// Length of the first step. When `None`, a tenth of the prior's
    /// average standard deviation.
    pub initial_step: Option<f64>,
    /// Points where the objective is not differentiable.
    pub avoid: Vec<Point>,
    pub avoid_radius: f64,
    pub nudge: f64,
    /// Override for the number of starts (default `10·d`).
    pub start_count: Option<usize>,
}

impl Default for MaximiseOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-8,
            rel_f_tol: 1e-10,
            initial_step: None,
            avoid: Vec::new(),
            avoid_radius: 1e-9,
            nudge: 1e-6,
            start_count: None,
        }
    }
}

/// Where one start ended up.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockResult {
    pub start: Point,
    pub point: Point,
    pub value: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maximum {
    pub point: Point,
    pub value: f64,
}

/// Maximises `f` from `10·d` prior draws with the default options.
pub fn maximise<O: Objective + ?Sized>(f: &O, prior: &GaussianMeasure, d: usize, seed: u64) -> Result<Maximum> {
    if d != f.dim() {
        return Err(Error::argument("dimension does not match objective"));
    }
    maximise_with(f, prior, seed, &MaximiseOptions::default())
}

pub fn maximise_with<O: Objective + ?Sized>(
    f: &O,
    prior: &GaussianMeasure,
    seed: u64,
    opts: &MaximiseOptions,
) -> Result<Maximum> {
    let d = f.dim();
    let count = opts.start_count.unwrap_or(STARTS_PER_DIMENSION * d);
    let mut starts = sample_n_starts(prior, count, seed)?.into_points();
    nudge_starts(&mut starts, opts, seed);
    let mut opts = opts.clone();
    if opts.initial_step.is_none() {
        let avg_var = prior.covariance().diagonal().mean();
        opts.initial_step = Some(0.1 * avg_var.sqrt());
    }
    let blocks = local_ascent(f, &starts, &opts)?;
    best_block(&blocks)
}

fn nudge_starts(starts: &mut [Point], opts: &MaximiseOptions, seed: u64) {
    if opts.avoid.is_empty() {
        return;
    }
    let mut rng = rng_for(seed, &[0x4e55_4447]);
    let r2 = opts.avoid_radius * opts.avoid_radius;
    for s in starts.iter_mut() {
        if opts.avoid.iter().any(|c| crate::sq_dist(s, c) <= r2) {
            let dir = standard_normal_vec(&mut rng, s.len());
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (v, u) in s.iter_mut().zip(&dir) {
                *v += opts.nudge * u / norm;
            }
        }
    }
}

pub fn best_block(blocks: &[BlockResult]) -> Result<Maximum> {
    blocks
        .iter()
        .filter(|b| b.value.is_finite())
        .fold(None::<&BlockResult>, |best, b| match best {
            Some(cur) if cur.value >= b.value => Some(cur),
            _ => Some(b),
        })
        .map(|b| Maximum {
            point: b.point.clone(),
            value: b.value,
        })
        .ok_or_else(|| Error::numerical("objective non-finite at every start"))
}

struct Block {
    start: Point,
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
    /// Inverse-Hessian approximation of `−f`.
    h: DMatrix<f64>,
    updated: bool,
    iterations: usize,
    done: bool,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// BFGS ascent from every start, one stacked evaluation per trial step.
///
/// Blocks that start at a non-finite value are returned unchanged with that
/// value; `best_block` skips them.
pub fn local_ascent<O: Objective + ?Sized>(f: &O, starts: &[Point], opts: &MaximiseOptions) -> Result<Vec<BlockResult>> {
    let d = f.dim();
    if starts.is_empty() {
        return Err(Error::argument("no start points"));
    }
    if starts.iter().any(|s| s.len() != d) {
        return Err(Error::argument("start dimension does not match objective"));
    }
    let init_step = opts.initial_step.unwrap_or(0.1);
    let first = f.evaluate(starts);
    let mut blocks: Vec<Block> = starts
        .iter()
        .zip(first)
        .map(|(s, e)| {
            let finite = e.value.is_finite() && e.grad.iter().all(|v| v.is_finite());
            let g = DVector::from_vec(e.grad);
            let gnorm = g.norm();
            let done = !finite || gnorm <= opts.grad_tol;
            let scale = if gnorm > 0.0 { init_step / gnorm } else { 1.0 };
            Block {
                start: s.clone(),
                x: DVector::from_column_slice(s),
                f: e.value,
                g,
                h: DMatrix::identity(d, d) * scale,
                updated: false,
                iterations: 0,
                done,
            }
        })
        .collect();

    for _ in 0..opts.max_iters {
        let active: Vec<usize> = (0..blocks.len()).filter(|&i| !blocks[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(active.len());
        for &i in &active {
            let b = &mut blocks[i];
            let mut p = &b.h * &b.g;
            if !(b.g.dot(&p) > 0.0) || p.iter().any(|v| !v.is_finite()) {
                let gnorm = b.g.norm();
                b.h = DMatrix::identity(d, d) * (init_step / gnorm);
                b.updated = false;
                p = &b.h * &b.g;
            }
            dirs.push(p);
        }

        // per-block backtracking; each round is one stacked evaluation
        let mut step = vec![1.0; active.len()];
        let mut pending: Vec<usize> = (0..active.len()).collect();
        let mut accepted: Vec<Option<(DVector<f64>, ValueGrad)>> = vec![None; active.len()];
        for _ in 0..MAX_BACKTRACKS {
            if pending.is_empty() {
                break;
            }
            let trial: Vec<Point> = pending
                .iter()
                .map(|&k| {
                    let b = &blocks[active[k]];
                    (&b.x + &dirs[k] * step[k]).iter().copied().collect()
                })
                .collect();
            let evals = f.evaluate(&trial);
            let mut still = Vec::new();
            for ((&k, e), x_new) in pending.iter().zip(evals).zip(trial) {
                let b = &blocks[active[k]];
                let slope = b.g.dot(&dirs[k]);
                let ok = e.value.is_finite()
                    && e.grad.iter().all(|v| v.is_finite())
                    && e.value >= b.f + ARMIJO_C * step[k] * slope;
                if ok {
                    accepted[k] = Some((DVector::from_vec(x_new), e));
                } else {
                    step[k] *= 0.5;
                    still.push(k);
                }
            }
            pending = still;
        }

        for (k, &i) in active.iter().enumerate() {
            let b = &mut blocks[i];
            b.iterations += 1;
            let Some((x_new, e)) = accepted[k].take() else {
                b.done = true;
                continue;
            };
            let g_new = DVector::from_vec(e.grad);
            let s = &x_new - &b.x;
            // gradient change of −f
            let y = &b.g - &g_new;
            let sy = s.dot(&y);
            if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
                if !b.updated {
                    b.h = DMatrix::identity(d, d) * (sy / y.dot(&y));
                    b.updated = true;
                }
                let rho = 1.0 / sy;
                let hy = &b.h * &y;
                let yhy = y.dot(&hy);
                // H ← (I − ρsyᵀ)H(I − ρysᵀ) + ρssᵀ
                b.h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                    - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            }
            let f_old = b.f;
            b.x = x_new;
            b.f = e.value;
            b.g = g_new;
            let gain = b.f - f_old;
            if b.g.norm() <= opts.grad_tol || gain <= opts.rel_f_tol * b.f.abs().max(f_old.abs()) {
                b.done = true;
            }
        }
    }

    Ok(blocks
        .into_iter()
        .map(|b| BlockResult {
            start: b.start,
            point: b.x.iter().copied().collect(),
            value: b.f,
            iterations: b.iterations,
        })
        .collect())
}

/// Uniform random point in an axis-aligned box, used by tests and problems.
pub(crate) fn uniform_in_box(rng: &mut crate::rng::Rng, lo: &[f64], hi: &[f64]) -> Point {
    lo.iter().zip(hi).map(|(l, h)| rng.gen_range(*l..*h)).collect()
}
