//! Acceptance criteria 1-10. Runs sequentially under a custom harness and
//! prints one PASS/FAIL line per criterion.
//!
//! `cargo test -p batchquad --test acceptance -- 3 5` runs a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use batchquad::batch::{
    fit_warped_model, run_batch_bq, select_batch_kb_traced, soft_min, BatchConfig, BatchMethod, LipschitzCone,
    PenalisedAcquisition,
};
use batchquad::experiments::{
    gen_inmodel_problem, gen_mixture_problem_with, run_experiment_rows, CsvRow, ExperimentKind, ExperimentSpec,
    Method, MixtureOptions,
};
use batchquad::gp::{fit_gp, se_kernel, GaussianMeasure, GpModel, KernelParams};
use batchquad::optimise::{concat_objective, fixed_step_ascent, FnObjective, Objective, StartSet};
use batchquad::quadrature::{
    kernel_prior_double_mean, kernel_prior_mean, kernel_product_integral, vanilla_bq_moments, wsabi_integral_mean,
    WsabiAcquisition,
};
use batchquad::rng::{rng_for, standard_normal, Rng};
use batchquad::{Point, WarpedModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

// ---------------------------------------------------------------------------
// shared helpers

fn trapezoid_nodes(lo: f64, hi: f64, n: usize) -> Vec<(f64, f64)> {
    let h = (hi - lo) / (n - 1) as f64;
    (0..n)
        .map(|i| (lo + h * i as f64, if i == 0 || i == n - 1 { 0.5 * h } else { h }))
        .collect()
}

/// Tensor trapezoid nodes over a box: `(point, weight)`.
fn box_nodes(lo: &[f64], hi: &[f64], n: usize) -> Vec<(Point, f64)> {
    let axes: Vec<_> = lo.iter().zip(hi).map(|(l, h)| trapezoid_nodes(*l, *h, n)).collect();
    let mut out = vec![(Vec::new(), 1.0)];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|(p, w)| {
                axis.iter().map(move |(x, wx)| {
                    let mut q = p.clone();
                    q.push(*x);
                    (q, w * wx)
                })
            })
            .collect();
    }
    out
}

fn gauss_density(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &[f64]) -> f64 {
    let d = mean.len();
    let diff = DVector::from_column_slice(x) - mean;
    let inv = cov.clone().try_inverse().unwrap();
    let q = (diff.transpose() * inv * &diff)[(0, 0)];
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * cov.determinant()).sqrt()
}

fn random_prior(rng: &mut Rng, d: usize) -> GaussianMeasure {
    let mean: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let cov = if d == 1 {
        DMatrix::from_element(1, 1, rng.gen_range(0.5..1.5))
    } else {
        let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let r = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        let e = DMatrix::from_diagonal(&DVector::from_vec(vec![rng.gen_range(0.4..1.5), rng.gen_range(0.4..1.5)]));
        &r * e * r.transpose()
    };
    GaussianMeasure::new(mean, cov).unwrap()
}

fn prior_box(prior: &GaussianMeasure, width: f64) -> (Vec<f64>, Vec<f64>) {
    let d = prior.dim();
    let lo = (0..d)
        .map(|i| prior.mean()[i] - width * prior.covariance()[(i, i)].sqrt())
        .collect();
    let hi = (0..d)
        .map(|i| prior.mean()[i] + width * prior.covariance()[(i, i)].sqrt())
        .collect();
    (lo, hi)
}

// ---------------------------------------------------------------------------
// 1. quadrature oracles

struct OracleModel {
    prior: GaussianMeasure,
    params: KernelParams,
    gp: GpModel,
    warped: WarpedModel,
}

fn oracle_model(seed: u64, d: usize) -> OracleModel {
    let mut rng = rng_for(seed, &[d as u64, 0xAC1]);
    let prior = random_prior(&mut rng, d);
    // lengthscales short enough that six noiseless points stay well conditioned
    let lambda = if d == 1 { rng.gen_range(0.3..1.0) } else { rng.gen_range(0.5..1.5) };
    let params = KernelParams::new(rng.gen_range(0.5..2.0), lambda).unwrap();
    let xs: Vec<Point> = (0..6).map(|_| prior.sample(&mut rng)).collect();
    let ys: Vec<f64> = xs.iter().map(|_| standard_normal(&mut rng)).collect();
    let gp = fit_gp(&xs, &ys, params, 1e-10 * params.variance()).unwrap();
    let ell: Vec<f64> = xs.iter().map(|_| standard_normal(&mut rng).exp()).collect();
    let warped = WarpedModel::fit(xs, &ell, 0.8, params, 1e-10 * params.variance()).unwrap();
    OracleModel {
        prior,
        params,
        gp,
        warped,
    }
}

/// Independent posterior pieces: `L⁻¹k_X(x)` from a fresh Cholesky.
fn whitened_cross(gp: &GpModel, nodes: &[(Point, f64)]) -> Vec<DVector<f64>> {
    let xs = gp.inputs();
    let n = xs.len();
    let p = gp.params();
    let k = DMatrix::from_fn(n, n, |i, j| se_kernel(&xs[i], &xs[j], p).unwrap() + if i == j { gp.jitter() } else { 0.0 });
    let l = k.cholesky().unwrap().l();
    nodes
        .iter()
        .map(|(x, _)| {
            let kx = DVector::from_fn(n, |i, _| se_kernel(x, &xs[i], p).unwrap());
            l.solve_lower_triangular(&kx).unwrap()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, r: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max(r);
    };
    for seed in 0..20u64 {
        for d in [1usize, 2] {
            let m = oracle_model(seed, d);
            let mean = m.prior.mean().clone();
            let cov = m.prior.covariance().clone();
            let (lo, hi) = prior_box(&m.prior, 9.0);
            let single = box_nodes(&lo, &hi, if d == 1 { 801 } else { 201 });
            let dens: Vec<f64> = single.iter().map(|(x, _)| gauss_density(&mean, &cov, x)).collect();
            let integrate = |f: &dyn Fn(&[f64]) -> f64| -> f64 {
                single.iter().zip(&dens).map(|((x, w), p)| w * p * f(x)).sum()
            };

            let mut rng = rng_for(seed, &[d as u64, 0xAC2]);
            let a = m.prior.sample(&mut rng);
            let b = m.prior.sample(&mut rng);

            let km = kernel_prior_mean(&m.params, &m.prior, &a).unwrap();
            note("kernel_prior_mean", rel(km, integrate(&|s| se_kernel(&a, s, &m.params).unwrap())));

            let gamma = kernel_product_integral(&m.params, &m.prior, &a, &b).unwrap();
            let oracle = integrate(&|s| se_kernel(&a, s, &m.params).unwrap() * se_kernel(s, &b, &m.params).unwrap());
            note("kernel_product_integral", rel(gamma, oracle));

            let vb = vanilla_bq_moments(&m.gp, &m.prior).unwrap();
            note("vanilla_bq_mean", rel(vb.mean, integrate(&|x| m.gp.posterior(x).unwrap().0)));

            let wm = wsabi_integral_mean(&m.warped, &m.prior);
            let alpha = m.warped.alpha();
            let oracle = integrate(&|x| {
                let g = m.warped.g_model().posterior(x).unwrap().0;
                alpha + 0.5 * g * g
            });
            note("wsabi_integral_mean", rel(wm, oracle));

            // double integrals over the product box
            let pair = box_nodes(&lo, &hi, if d == 1 { 401 } else { 61 });
            let pd: Vec<f64> = pair.iter().map(|(x, w)| w * gauss_density(&mean, &cov, x)).collect();
            let v = whitened_cross(&m.gp, &pair);
            let mut dm = 0.0;
            let mut var = 0.0;
            for i in 0..pair.len() {
                for j in 0..pair.len() {
                    let k = se_kernel(&pair[i].0, &pair[j].0, &m.params).unwrap();
                    let w = pd[i] * pd[j];
                    dm += w * k;
                    var += w * (k - v[i].dot(&v[j]));
                }
            }
            note("kernel_prior_double_mean", rel(kernel_prior_double_mean(&m.params, &m.prior), dm));
            note("vanilla_bq_variance", rel(vb.variance, var));
        }
    }
    let pass = worst.values().all(|r| *r <= 1e-6);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(pass, format!("max relative error: {detail}"))
}

// ---------------------------------------------------------------------------
// 2. gradients

fn mixture_model(seed: u64, d: usize, n: usize) -> (WarpedModel, GaussianMeasure) {
    let opts = MixtureOptions {
        dim: d,
        ..MixtureOptions::default()
    };
    let problem = gen_mixture_problem_with(seed, &opts).unwrap();
    let mut rng = rng_for(seed, &[0x6752]);
    let xs: Vec<Point> = (0..n).map(|_| problem.prior.sample(&mut rng)).collect();
    let ell: Vec<f64> = xs.iter().map(|x| problem.integrand.evaluate(x)).collect();
    let cfg = BatchConfig::new(BatchMethod::LocalPenalisation, 1, 100, seed);
    (fit_warped_model(&xs, &ell, &cfg, None, seed).unwrap(), problem.prior)
}

fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut q = x.to_vec();
            p[i] += h;
            q[i] -= h;
            (f(&p) - f(&q)) / (2.0 * h)
        })
        .collect()
}

fn grad_rel_error(g: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = g.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

fn criterion_2() -> Outcome {
    let mut worst_acq: f64 = 0.0;
    let mut worst_pen: f64 = 0.0;
    let mut checked = 0;
    for (seed, d) in [(1u64, 2usize), (2, 4)] {
        let (model, prior) = mixture_model(seed, d, 15);
        let lambda = model.g_model().params().lengthscale;
        let h = 1e-6 * lambda;
        let base = WsabiAcquisition::for_dim(&model, d);
        let mut pa = PenalisedAcquisition::new(WsabiAcquisition::for_dim(&model, d), -6, 1e-12, 0.5).unwrap();
        let mut rng = rng_for(seed, &[0x6753]);
        for _ in 0..3 {
            pa.add_penaliser(prior.sample(&mut rng), &base, lambda).unwrap();
        }
        let centres: Vec<Point> = pa.cones().iter().map(|c| c.center.clone()).collect();
        let mut n = 0;
        while n < 100 {
            let x = prior.sample(&mut rng);
            let near = centres
                .iter()
                .any(|c| c.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < 0.1 * lambda);
            if near {
                continue;
            }
            n += 1;
            let (_, g) = model.acquisition(&x).unwrap();
            let fd = fd_gradient(&|y| model.acquisition(y).unwrap().0, &x, h);
            worst_acq = worst_acq.max(grad_rel_error(&g, &fd));
            let g = pa.penalised_value(&x).grad;
            let fd = fd_gradient(&|y| pa.penalised_value(y).value, &x, h);
            worst_pen = worst_pen.max(grad_rel_error(&g, &fd));
        }
        checked += n;
    }
    outcome(
        worst_acq <= 1e-3 && worst_pen <= 1e-3,
        format!("{checked} points; max relative error acquisition {worst_acq:.1e}, penalised {worst_pen:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 3. soft-min bounds

fn criterion_3() -> Outcome {
    let p = -6;
    let mut rng = rng_for(3, &[0x534d]);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    let mut check = |values: &[f64], value: f64| {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let lower = min * (values.len() as f64).powf(1.0 / p as f64);
        // one ulp-scale allowance for rounding at the equal-components limit
        let slack = 4.0 * f64::EPSILON * min;
        if value > min + slack || value < lower - slack {
            violations += 1;
        }
        worst = worst.max(((value - min).max(lower - value)).max(0.0) / min);
    };
    for _ in 0..1000 {
        let k = rng.gen_range(1..=10);
        let v: Vec<f64> = (0..k).map(|_| 10f64.powf(rng.gen_range(-6.0..6.0))).collect();
        check(&v, soft_min(&v, p, 1e-12).0);
    }
    // through the penalised acquisition: base plus random cones
    let base = FnObjective::new(2, |x: &[f64]| {
        let e = 1.0 + 0.5 * (x[0] * x[1]).sin();
        (e, vec![0.5 * x[1] * (x[0] * x[1]).cos(), 0.5 * x[0] * (x[0] * x[1]).cos()])
    });
    for i in 0..1000 {
        let mut pa = PenalisedAcquisition::new(&base, p, 1e-12, 0.5).unwrap();
        let cones = 1 + i % 5;
        for _ in 0..cones {
            pa.push_cone(LipschitzCone {
                center: vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                lipschitz: rng.gen_range(0.1..5.0),
                slope_fraction: 0.5,
            });
        }
        let x = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let mut comps = vec![base.evaluate_one(&x).value];
        comps.extend(pa.cones().iter().map(|c| c.value(&x)));
        if comps.iter().all(|c| *c > 1e-12) {
            check(&comps, pa.penalised_value(&x).value);
        }
    }
    let (pair, _) = soft_min(&[1.0, 1.0], p, 1e-12);
    let pair_err = (pair - 2f64.powf(-1.0 / 6.0)).abs();
    outcome(
        violations == 0 && pair_err <= 1e-12,
        format!("{violations} bound violations in 2000 vectors (worst excess {worst:.1e}); |v(1,1) - 2^(-1/6)| = {pair_err:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 4. Kriging Believer identities

fn criterion_4() -> Outcome {
    let mut mean_drift: f64 = 0.0;
    let mut var_violation: f64 = 0.0;
    let mut steps = 0;
    for seed in 0..20u64 {
        let prior = GaussianMeasure::standard(2);
        let mut rng = rng_for(seed, &[0x4b42]);
        let xs: Vec<Point> = (0..8).map(|_| prior.sample(&mut rng)).collect();
        let ell: Vec<f64> = xs.iter().map(|_| standard_normal(&mut rng).exp()).collect();
        let cfg = BatchConfig::new(BatchMethod::KrigingBeliever, 5, 100, seed);
        let model = fit_warped_model(&xs, &ell, &cfg, None, seed).unwrap();
        let (_, models) = select_batch_kb_traced(&model, &prior, 5, &cfg).unwrap();
        let probes: Vec<Point> = (0..100).map(|_| prior.sample(&mut rng)).collect();
        let mut prev = model;
        for next in models {
            for p in &probes {
                let (m0, v0) = prev.g_model().posterior(p).unwrap();
                let (m1, v1) = next.g_model().posterior(p).unwrap();
                mean_drift = mean_drift.max((m1 - m0).abs());
                var_violation = var_violation.max(v1 - v0);
            }
            steps += 1;
            prev = next;
        }
    }
    outcome(
        mean_drift <= 1e-8 && var_violation <= 1e-9,
        format!("{steps} hallucinations x 100 probes; max mean drift {mean_drift:.1e}, max variance increase {var_violation:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 5. serial equivalence

fn criterion_5() -> Outcome {
    let mut cases = 0;
    let mut mismatches = Vec::new();
    let mixture = MixtureOptions {
        dim: 2,
        ..MixtureOptions::default()
    };
    for seed in 0..3u64 {
        let problems = [
            ("inmodel", gen_inmodel_problem(seed, 101).unwrap()),
            ("mixture", gen_mixture_problem_with(seed, &mixture).unwrap()),
        ];
        for (name, p) in &problems {
            let run = |m| {
                let cfg = BatchConfig::new(m, 1, 15, seed);
                run_batch_bq(p.integrand.as_ref(), &p.prior, &cfg).unwrap()
            };
            let kb = run(BatchMethod::KrigingBeliever);
            let lp = run(BatchMethod::LocalPenalisation);
            let same_records = kb.records.len() == lp.records.len()
                && kb.records.iter().zip(&lp.records).all(|(a, b)| {
                    a.batch_index == b.batch_index
                        && a.n_evaluations == b.n_evaluations
                        && a.estimate.to_bits() == b.estimate.to_bits()
                        && a.variance.to_bits() == b.variance.to_bits()
                });
            if !(same_records && kb.inputs == lp.inputs && kb.values == lp.values) {
                mismatches.push(format!("{name}/seed {seed}"));
            }
            cases += 1;
        }
    }
    outcome(
        mismatches.is_empty(),
        format!("{cases} traces compared bitwise; mismatches: {mismatches:?}"),
    )
}

// ---------------------------------------------------------------------------
// 6-8. trends

type ErrorTable = BTreeMap<(String, usize, usize), (f64, usize)>;

/// Mean absolute error keyed by (method, batch size, batch index).
fn mean_errors(rows: &[CsvRow]) -> ErrorTable {
    let mut acc: ErrorTable = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.method.clone(), r.batch_size, r.batch_index)).or_insert((0.0, 0));
        e.0 += r.abs_error;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, (s / n as f64, n))).collect()
}

fn err_at(t: &ErrorTable, m: &str, bs: usize, idx: usize) -> f64 {
    t[&(m.to_string(), bs, idx)].0
}

fn final_index(t: &ErrorTable, m: &str, bs: usize) -> usize {
    t.keys().filter(|(mm, b, _)| mm == m && *b == bs).map(|k| k.2).max().unwrap()
}

/// Strictly decreasing in batch size with at most one adjacent inversion.
fn monotone_after(t: &ErrorTable, m: &str, sizes: &[usize], idx: usize) -> (bool, String) {
    let errs: Vec<f64> = sizes.iter().map(|b| err_at(t, m, *b, idx)).collect();
    let inversions = errs.windows(2).filter(|w| w[1] >= w[0]).count();
    let text = sizes
        .iter()
        .zip(&errs)
        .map(|(b, e)| format!("{b}:{e:.3e}"))
        .collect::<Vec<_>>()
        .join(" ");
    (inversions <= 1, format!("{m} after {idx} batches [{text}] inversions {inversions}"))
}

fn trend_spec(kind: ExperimentKind, budget: usize) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(
        kind,
        vec![1, 2, 5, 10],
        vec![
            Method::Batch(BatchMethod::KrigingBeliever),
            Method::Batch(BatchMethod::LocalPenalisation),
        ],
        10,
        0,
    );
    spec.budget = budget;
    spec
}

fn criterion_6() -> Outcome {
    let rows = run_experiment_rows(&trend_spec(ExperimentKind::InModel, 103)).unwrap();
    let t = mean_errors(&rows);
    let mut pass = true;
    let mut parts = Vec::new();
    for m in ["kb", "lp"] {
        let (ok, text) = monotone_after(&t, m, &[1, 2, 5, 10], 5);
        pass &= ok;
        parts.push(text);
        let serial_batches = final_index(&t, m, 1);
        let target = err_at(&t, m, 1, serial_batches);
        let reached = (0..=final_index(&t, m, 10)).find(|k| err_at(&t, m, 10, *k) <= target);
        let allowed = 0.4 * serial_batches as f64;
        let ok = reached.is_some_and(|k| k as f64 <= allowed);
        pass &= ok;
        parts.push(format!(
            "{m} bs10 reaches bs1 final error {target:.3e} at batch {reached:?} (allowed {allowed}, bs10 final {:.3e})",
            err_at(&t, m, 10, final_index(&t, m, 10))
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_7() -> Outcome {
    let rows = run_experiment_rows(&trend_spec(ExperimentKind::Mixture, 203)).unwrap();
    let t = mean_errors(&rows);
    let mut pass = true;
    let mut parts = Vec::new();
    for m in ["kb", "lp"] {
        let (ok, text) = monotone_after(&t, m, &[1, 2, 5, 10], 5);
        pass &= ok;
        parts.push(text);
    }
    outcome(pass, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let spec = ExperimentSpec::new(
        ExperimentKind::Evidence,
        vec![10],
        vec![
            Method::Batch(BatchMethod::KrigingBeliever),
            Method::Batch(BatchMethod::LocalPenalisation),
            Method::PriorMc,
            Method::Mh,
        ],
        10,
        0,
    );
    let rows = run_experiment_rows(&spec).unwrap();
    let mut by_count: BTreeMap<(usize, String), (f64, usize)> = BTreeMap::new();
    for r in &rows {
        let e = by_count.entry((r.n_evaluations, r.method.clone())).or_insert((0.0, 0));
        e.0 += r.abs_error;
        e.1 += 1;
    }
    let mean = |n: usize, m: &str| {
        let (s, c) = by_count[&(n, m.to_string())];
        s / c as f64
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [23, 43, 63, 83, 103] {
        let (kb, lp, mc, mh) = (mean(n, "kb"), mean(n, "lp"), mean(n, "prior-mc"), mean(n, "mh"));
        let baseline = mc.min(mh);
        let ok = kb < baseline && lp < baseline;
        pass &= ok;
        parts.push(format!(
            "n={n} kb {kb:.3} lp {lp:.3} prior-mc {mc:.3} mh {mh:.3}{}",
            if ok { "" } else { " <-" }
        ));
    }
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 9. determinism

fn strip_wallclock(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn run_cli(args: &[&str], out: &Path) -> Result<String, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_batchquad"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(String::from_utf8_lossy(&status.stderr).into_owned());
    }
    std::fs::read_to_string(out).map_err(|e| e.to_string())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for exp in ["inmodel", "mixture", "evidence"] {
        let args = [
            exp,
            "--batch-size",
            "1,5",
            "--method",
            "kb,lp,mh,prior-mc",
            "--budget",
            "13",
            "--runs",
            "2",
            "--seed",
            "11",
            "--grid-res",
            "201",
        ];
        let a = run_cli(&args, &dir.path().join(format!("{exp}-a.csv")));
        let b = run_cli(&args, &dir.path().join(format!("{exp}-b.csv")));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                let same = strip_wallclock(&a) == strip_wallclock(&b);
                pass &= same;
                parts.push(format!("{exp}: {} rows {}", a.lines().count() - 1, if same { "identical" } else { "DIFFER" }));
            }
            (a, b) => {
                pass = false;
                parts.push(format!("{exp}: run failed {:?} {:?}", a.err(), b.err()));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

// ---------------------------------------------------------------------------
// 10. multistart equivalence

fn criterion_10() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = rng_for(seed, &[0x4d53]);
        let d = rng.gen_range(1..=4);
        let terms = 3;
        let w: Vec<Vec<f64>> = (0..terms).map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
        let a: Vec<f64> = (0..terms).map(|_| rng.gen_range(0.2..1.0)).collect();
        let c: Vec<f64> = (0..terms).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let f = FnObjective::new(d, move |x: &[f64]| {
            let mut v = -0.1 * x.iter().map(|t| t * t).sum::<f64>();
            let mut g: Vec<f64> = x.iter().map(|t| -0.2 * t).collect();
            for k in 0..terms {
                let arg = w[k].iter().zip(x).map(|(p, q)| p * q).sum::<f64>() + c[k];
                v += a[k] * arg.sin();
                for i in 0..d {
                    g[i] += a[k] * arg.cos() * w[k][i];
                }
            }
            (v, g)
        });
        let count = rng.gen_range(3..=8);
        let starts: Vec<Point> = (0..count)
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let set = StartSet::new(starts.clone()).unwrap();
        let stacked = concat_objective(&f, &set).unwrap();
        let joint = fixed_step_ascent(|x| stacked.value_grad(x), &starts.concat(), 0.05, 200);
        let joint = stacked.split(&joint);
        for (s, j) in starts.iter().zip(&joint) {
            let single = fixed_step_ascent(
                |x| {
                    let e = f.evaluate_one(x);
                    (e.value, e.grad)
                },
                s,
                0.05,
                200,
            );
            for (p, q) in single.iter().zip(j) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    outcome(worst <= 1e-8, format!("20 objectives; max block difference {worst:.1e}"))
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "quadrature oracles", limit: Some(Duration::from_secs(60)), run: criterion_1 },
        Criterion { id: 2, name: "gradients", limit: Some(Duration::from_secs(30)), run: criterion_2 },
        Criterion { id: 3, name: "soft-min bounds", limit: None, run: criterion_3 },
        Criterion { id: 4, name: "kriging believer identities", limit: None, run: criterion_4 },
        Criterion { id: 5, name: "serial equivalence", limit: None, run: criterion_5 },
        Criterion { id: 6, name: "in-model trend", limit: Some(Duration::from_secs(600)), run: criterion_6 },
        Criterion { id: 7, name: "mixture trend", limit: Some(Duration::from_secs(1200)), run: criterion_7 },
        Criterion { id: 8, name: "evidence vs baselines", limit: Some(Duration::from_secs(900)), run: criterion_8 },
        Criterion { id: 9, name: "determinism", limit: None, run: criterion_9 },
        Criterion { id: 10, name: "multistart equivalence", limit: None, run: criterion_10 },
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for c in &criteria {
        if !selected.is_empty() && !selected.contains(&c.id) {
            continue;
        }
        let started = Instant::now();
        let mut out = (c.run)();
        let elapsed = started.elapsed();
        if let Some(limit) = c.limit {
            if elapsed > limit {
                out.pass = false;
                out.detail.push_str(&format!("; exceeded runtime limit {limit:?}"));
            }
        }
        println!(
            "criterion {:>2} {:<28} {} ({:.1} s) {}",
            c.id,
            c.name,
            if out.pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            out.detail
        );
        if !out.pass {
            failed.push(c.id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
