//! Random-walk Metropolis–Hastings with independent parallel chains, plus the
//! two evidence estimators used as baselines.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::gp::GaussianMeasure;
use crate::rng::{rng_for, standard_normal, Rng};
use crate::Point;

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub n_chains: usize,
    pub burn_in: usize,
    pub samples_per_chain: usize,
    pub proposal_sd: f64,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_chains: 1,
            burn_in: 500,
            samples_per_chain: 1000,
            proposal_sd: 0.5,
            seed: 0,
        }
    }
}

impl ChainConfig {
    fn validate(&self) -> Result<()> {
        if self.samples_per_chain == 0 {
            return Err(Error::argument("samples_per_chain must be at least 1"));
        }
        if !(self.proposal_sd > 0.0 && self.proposal_sd.is_finite()) {
            return Err(Error::argument("proposal_sd must be positive"));
        }
        Ok(())
    }
}

/// Accepts with probability `min(1, exp(log_ratio))` given a uniform draw.
/// NaN ratios are rejected.
pub fn mh_accept(log_ratio: f64, uniform: f64) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    log_ratio.is_finite() && uniform < log_ratio.exp()
}

/// One random-walk chain with isotropic Gaussian proposals; returns the
/// post-burn-in states.
pub fn mh_chain(log_target: &dyn Fn(&[f64]) -> f64, init: &[f64], cfg: &ChainConfig, chain_index: usize) -> Result<Vec<Point>> {
    cfg.validate()?;
    let mut current_lp = log_target(init);
    if !current_lp.is_finite() {
        return Err(Error::argument(format!("log target is {current_lp} at the initial point")));
    }
    let mut rng: Rng = rng_for(cfg.seed, &[0x4d48, chain_index as u64]);
    let mut current = init.to_vec();
    let mut out = Vec::with_capacity(cfg.samples_per_chain);
    for step in 0..cfg.burn_in + cfg.samples_per_chain {
        let proposal: Point = current
            .iter()
            .map(|v| v + cfg.proposal_sd * standard_normal(&mut rng))
            .collect();
        let lp = log_target(&proposal);
        let u: f64 = rng.gen();
        if mh_accept(lp - current_lp, u) {
            current = proposal;
            current_lp = lp;
        }
        if step >= cfg.burn_in {
            out.push(current.clone());
        }
    }
    Ok(out)
}

/// Independent seeded chains, one per initial point, returned in chain order.
pub fn run_parallel_chains(
    log_target: &(dyn Fn(&[f64]) -> f64 + Sync),
    cfg: &ChainConfig,
    inits: &[Point],
) -> Result<Vec<Vec<Point>>> {
    if inits.len() != cfg.n_chains {
        return Err(Error::argument(format!(
            "{} initial points for {} chains",
            inits.len(),
            cfg.n_chains
        )));
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = inits
            .iter()
            .enumerate()
            .map(|(i, init)| scope.spawn(move || mh_chain(log_target, init, cfg, i)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("chain thread panicked"))
            .collect()
    })
}

/// Interleaves chains step by step: the first `k·n_chains` pooled samples
/// are the first `k` states of every chain.
pub fn pool_interleaved(chains: &[Vec<Point>]) -> Vec<Point> {
    let len = chains.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .flat_map(|i| chains.iter().filter_map(move |c| c.get(i).cloned()))
        .collect()
}

/// `(1/N)·Σℓ(θᵢ)` over `N` seeded prior draws.
pub fn estimate_evidence_prior_mc(
    likelihood: &dyn Fn(&[f64]) -> f64,
    prior: &GaussianMeasure,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::argument("need at least one sample"));
    }
    let mut rng = rng_for(seed, &[0x504d_4300]);
    let sum: f64 = (0..n_samples).map(|_| likelihood(&prior.sample(&mut rng))).sum();
    Ok(sum / n_samples as f64)
}

/// Harmonic-mean estimate `N / Σ 1/ℓ(θᵢ)` from posterior samples.
///
/// High variance; provided as a baseline only.
pub fn estimate_evidence_harmonic(chain_samples: &[Point], likelihood: &dyn Fn(&[f64]) -> f64) -> Result<f64> {
    if chain_samples.is_empty() {
        return Err(Error::argument("no samples"));
    }
    let mut inv_sum = 0.0;
    for s in chain_samples {
        let l = likelihood(s);
        if !(l > 0.0) {
            return Err(Error::numerical(format!("likelihood {l} at {s:?}; harmonic mean undefined")));
        }
        inv_sum += 1.0 / l;
    }
    Ok(chain_samples.len() as f64 / inv_sum)
}
