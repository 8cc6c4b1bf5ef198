//! Experiment grid execution and CSV traces.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use super::problems::{gen_problem, ExperimentKind, MixtureOptions, Problem};
use crate::batch::{run_batch_bq, BatchConfig, BatchMethod, DEFAULT_SLOPE_FRACTION, DEFAULT_SOFT_MIN_EXPONENT};
use crate::error::{Error, Result};
use crate::mcmc::{pool_interleaved, run_parallel_chains, ChainConfig};
use crate::rng::{derive_seed, rng_for};
use crate::Point;

pub const CSV_HEADER: [&str; 11] = [
    "experiment",
    "method",
    "batch_size",
    "run",
    "batch_index",
    "n_evaluations",
    "estimate",
    "estimate_variance",
    "ground_truth",
    "abs_error",
    "wallclock_ms",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Batch(BatchMethod),
    /// Harmonic mean over pooled Metropolis–Hastings chains.
    Mh,
    PriorMc,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Batch(m) => m.tag(),
            Method::Mh => "mh",
            Method::PriorMc => "prior-mc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mh" => Ok(Method::Mh),
            "prior-mc" => Ok(Method::PriorMc),
            other => other.parse().map(Method::Batch),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub kind: ExperimentKind,
    pub batch_sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub budget: usize,
    pub runs: usize,
    pub seed: u64,
    pub output_path: Option<PathBuf>,
    pub min_fraction: f64,
    pub slope_fraction: f64,
    pub p: i32,
    pub grid_res: usize,
    pub mixture: MixtureOptions,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, batch_sizes: Vec<usize>, methods: Vec<Method>, runs: usize, seed: u64) -> Self {
        Self {
            kind,
            batch_sizes,
            methods,
            budget: kind.default_budget(),
            runs,
            seed,
            output_path: None,
            min_fraction: 0.8,
            slope_fraction: DEFAULT_SLOPE_FRACTION,
            p: DEFAULT_SOFT_MIN_EXPONENT,
            grid_res: 501,
            mixture: MixtureOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::argument("batch sizes must be a non-empty list of positive integers"));
        }
        if self.methods.is_empty() {
            return Err(Error::argument("at least one method is required"));
        }
        if self.runs == 0 {
            return Err(Error::argument("runs must be at least 1"));
        }
        if self.grid_res < 3 {
            return Err(Error::argument("grid resolution must be at least 3"));
        }
        let mut probe = BatchConfig::new(BatchMethod::KrigingBeliever, 1, self.budget, self.seed);
        self.apply(&mut probe);
        probe.validate()
    }

    fn apply(&self, cfg: &mut BatchConfig) {
        cfg.min_fraction = self.min_fraction;
        cfg.slope_fraction = self.slope_fraction;
        cfg.p = self.p;
    }

    fn initial_design(&self) -> usize {
        BatchConfig::new(BatchMethod::KrigingBeliever, 1, self.budget, 0).initial_design
    }

    /// Evaluation counts at which a batch size reports: `n₀, n₀ + n, …`, the
    /// last one capped at the budget.
    pub fn schedule(&self, batch_size: usize) -> Vec<usize> {
        let mut counts = vec![self.initial_design()];
        while *counts.last().unwrap() < self.budget {
            let next = (counts.last().unwrap() + batch_size).min(self.budget);
            counts.push(next);
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub experiment: String,
    pub method: String,
    pub batch_size: usize,
    pub run: usize,
    pub batch_index: usize,
    pub n_evaluations: usize,
    pub estimate: f64,
    pub estimate_variance: f64,
    pub ground_truth: f64,
    pub abs_error: f64,
    pub wallclock_ms: f64,
}

struct Cell<'a> {
    spec: &'a ExperimentSpec,
    problem: &'a Problem,
    run: usize,
    batch_size: usize,
}

impl Cell<'_> {
    fn row(&self, method: Method, batch_index: usize, n: usize, z: f64, var: f64, ms: f64) -> CsvRow {
        let estimate = self.problem.report(z);
        let truth = self.problem.truth.value;
        CsvRow {
            experiment: self.spec.kind.tag().to_string(),
            method: method.tag().to_string(),
            batch_size: self.batch_size,
            run: self.run,
            batch_index,
            n_evaluations: n,
            estimate,
            estimate_variance: self.problem.report_variance(z, var),
            ground_truth: truth,
            abs_error: (estimate - truth).abs(),
            wallclock_ms: ms,
        }
    }
}

/// Seed shared by every cell of one run, so methods and batch sizes see the
/// same problem and the same initial design.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    derive_seed(seed, &[run as u64])
}

fn run_bq(cell: &Cell, method: BatchMethod) -> Result<Vec<CsvRow>> {
    let mut cfg = BatchConfig::new(method, cell.batch_size, cell.spec.budget, derive_seed(run_seed(cell.spec.seed, cell.run), &[0xB0]));
    cell.spec.apply(&mut cfg);
    let trace = run_batch_bq(cell.problem.integrand.as_ref(), &cell.problem.prior, &cfg)?;
    Ok(trace
        .records
        .iter()
        .map(|r| {
            cell.row(Method::Batch(method), r.batch_index, r.n_evaluations, r.estimate, r.variance, r.wallclock_ms)
        })
        .collect())
}

fn run_prior_mc(cell: &Cell) -> Result<Vec<CsvRow>> {
    let started = Instant::now();
    let seed = derive_seed(run_seed(cell.spec.seed, cell.run), &[0x4D43]);
    let mut rng = rng_for(seed, &[]);
    let schedule = cell.spec.schedule(cell.batch_size);
    let ell = cell.problem.integrand.as_ref();
    let mut values = Vec::with_capacity(cell.spec.budget);
    let mut rows = Vec::with_capacity(schedule.len());
    for (k, &n) in schedule.iter().enumerate() {
        while values.len() < n {
            values.push(ell.evaluate(&cell.problem.prior.sample(&mut rng)));
        }
        let (mean, var) = mean_and_variance(&values);
        let z = mean;
        let ms = started.elapsed().as_secs_f64() * 1e3;
        rows.push(cell.row(Method::PriorMc, k, n, z, var / n as f64, ms));
    }
    Ok(rows)
}

const MAX_INIT_ATTEMPTS: usize = 1000;

fn run_mh(cell: &Cell) -> Result<Vec<CsvRow>> {
    let started = Instant::now();
    let seed = derive_seed(run_seed(cell.spec.seed, cell.run), &[0x4D48]);
    let problem = cell.problem;
    let ell = problem.integrand.as_ref();
    let prior = &problem.prior;
    let chains = cell.batch_size;
    let log_target = |x: &[f64]| ell.evaluate(x).ln() + prior.log_density(x);

    let mut rng = rng_for(seed, &[0x494E]);
    let mut inits: Vec<Point> = Vec::with_capacity(chains);
    for _ in 0..chains {
        let mut attempt = 0;
        let init = loop {
            let x = prior.sample(&mut rng);
            if log_target(&x).is_finite() {
                break x;
            }
            attempt += 1;
            if attempt >= MAX_INIT_ATTEMPTS {
                return Err(Error::numerical("no prior draw with positive likelihood for a chain start"));
            }
        };
        inits.push(init);
    }
    let cfg = ChainConfig {
        n_chains: chains,
        samples_per_chain: cell.spec.budget.div_ceil(chains),
        seed,
        ..ChainConfig::default()
    };
    let pooled = pool_interleaved(&run_parallel_chains(&log_target, &cfg, &inits)?);
    let inv: Vec<f64> = pooled.iter().map(|x| 1.0 / ell.evaluate(x)).collect();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("chain visited a point with zero likelihood"));
    }
    let schedule = cell.spec.schedule(cell.batch_size);
    let mut rows = Vec::with_capacity(schedule.len());
    for (k, &n) in schedule.iter().enumerate() {
        let (mean_inv, var_inv) = mean_and_variance(&inv[..n]);
        let z = 1.0 / mean_inv;
        // delta method for 1/x̄
        let var = var_inv / n as f64 / mean_inv.powi(4);
        let ms = started.elapsed().as_secs_f64() * 1e3;
        rows.push(cell.row(Method::Mh, k, n, z, var, ms));
    }
    Ok(rows)
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Runs every (run, method, batch size) cell without touching the disk.
pub fn run_experiment_rows(spec: &ExperimentSpec) -> Result<Vec<CsvRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for run in 0..spec.runs {
        let problem = gen_problem(spec.kind, run_seed(spec.seed, run), spec.grid_res, &spec.mixture)?;
        for &method in &spec.methods {
            for &batch_size in &spec.batch_sizes {
                let cell = Cell {
                    spec,
                    problem: &problem,
                    run,
                    batch_size,
                };
                rows.extend(match method {
                    Method::Batch(m) => run_bq(&cell, m)?,
                    Method::PriorMc => run_prior_mc(&cell)?,
                    Method::Mh => run_mh(&cell)?,
                });
            }
        }
    }
    Ok(rows)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs the grid and, if an output path is set, writes the CSV atomically.
///
/// The destination directory is checked before any computation starts.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<CsvRow>> {
    spec.validate()?;
    let staged = match &spec.output_path {
        Some(path) => {
            let dir = match path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            };
            Some(NamedTempFile::new_in(&dir).map_err(|e| io_error(path, e))?)
        }
        None => None,
    };
    let rows = run_experiment_rows(spec)?;
    if let (Some(tmp), Some(path)) = (staged, &spec.output_path) {
        write_rows(tmp.as_file(), &rows, path)?;
        tmp.persist(path).map_err(|e| io_error(path, e.error))?;
    }
    Ok(rows)
}

fn write_rows(file: &File, rows: &[CsvRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| io_error(path, e))?;
    Ok(())
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    write_rows(&file, rows, path)?;
    file.sync_all().map_err(|e| io_error(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
