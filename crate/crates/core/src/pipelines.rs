//! The pipelines behind [`crate::experiment::run_pipelines`]. Each returns
//! its CSV tables and appends headline numbers to the shared summary.
//!
//! Every replication `r` is driven by the data stream
//! `derive_seed(master_seed, [r])`, shared across stepsizes.

use rayon::prelude::*;

use crate::bias::{empirical_bias, BiasBudget};
use crate::chain::{stepsize_advisory, DEFAULT_DELTA_GRID};
use crate::coupling::{coupled_run, CoupledTrace};
use crate::diagnostics::{clt_covariance, fit_decay, mse_decomposition, normality_check, tail_variance};
use crate::engine::{run, tail_average, Recording, RunOptions, RunTrace, Schedule};
use crate::error::{QsaError, Result};
use crate::experiment::{Experiment, Pipeline};
use crate::lfa::{lfa_run, projected_value_iteration};
use crate::mdp::sup_norm;
use crate::report::{num, opt_num, Summary, Table};
use crate::stats::{derive_seed, l1_dist, mean, std_error};

const PVI_TOL: f64 = 1e-12;
const MAX_TV_ROWS: usize = 10_000;
const MAX_CURVE_ROWS: usize = 1000;

pub(crate) fn dispatch(exp: &Experiment, p: Pipeline, summary: &mut Summary) -> Result<Vec<Table>> {
    match p {
        Pipeline::Solve => solve(exp, summary),
        Pipeline::Chain => chain(exp, summary),
        Pipeline::Convergence => convergence(exp, summary),
        Pipeline::Bias => bias(exp, summary),
        Pipeline::Clt => clt(exp, summary),
        Pipeline::Rr => rr(exp, summary),
        Pipeline::Figure1 => figure1(exp, summary),
        Pipeline::Lfa => lfa(exp, summary),
    }
}

fn rep_seed(exp: &Experiment, r: usize) -> u64 {
    derive_seed(exp.spec.master_seed, &[r as u64])
}

fn sorted_alphas(exp: &Experiment) -> Vec<f64> {
    let mut a = exp.spec.stepsizes.clone();
    a.sort_by(f64::total_cmp);
    a
}

fn alpha_key(alpha: f64) -> String {
    format!("alpha={}", num(alpha))
}

fn shifted(v: &[f64], by: f64) -> Vec<f64> {
    v.iter().map(|x| x + by).collect()
}

/// `(α-index, replication)` cells, run in parallel and returned in order.
fn cells<T: Send>(
    n_alpha: usize,
    reps: usize,
    f: impl Fn(usize, usize) -> Result<T> + Sync,
) -> Result<Vec<Vec<T>>> {
    let idx: Vec<(usize, usize)> = (0..n_alpha).flat_map(|i| (0..reps).map(move |r| (i, r))).collect();
    let flat: Vec<Result<T>> = idx.par_iter().map(|&(i, r)| f(i, r)).collect();
    let mut out: Vec<Vec<T>> = (0..n_alpha).map(|_| Vec::with_capacity(reps)).collect();
    for ((i, _), v) in idx.into_iter().zip(flat) {
        out[i].push(v?);
    }
    Ok(out)
}

fn solve(exp: &Experiment, summary: &mut Summary) -> Result<Vec<Table>> {
    let (mdp, sol) = (&exp.mdp, &exp.solution);
    let mut t = Table::new("solve.csv", &["s", "a", "q_star", "greedy"]);
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let greedy = u8::from(sol.pi_star[s] == a);
            t.push(vec![s.to_string(), a.to_string(), num(sol.q_star[mdp.sa(s, a)]), greedy.to_string()]);
        }
    }
    let p = "solve";
    summary.add_num(p, "", "gamma", mdp.gamma());
    summary.add_num(p, "", "bellman_residual", sol.residual);
    summary.add_num(p, "", "gap_delta", sol.gap_delta);
    summary.add(p, "", "unique_policy", sol.has_unique_policy());
    summary.add(p, "", "iterations", sol.iterations);
    Ok(vec![t])
}

fn chain(exp: &Experiment, summary: &mut Summary) -> Result<Vec<Table>> {
    let chain = &exp.chain;
    let profile = chain.mixing();
    let k_max = profile
        .t_delta_table
        .iter()
        .rev()
        .find_map(|(_, t)| *t)
        .unwrap_or(MAX_TV_ROWS)
        .clamp(1, MAX_TV_ROWS);
    let mut tv = Table::new("chain_tv.csv", &["k", "tv"]);
    for (k, v) in chain.markov().tv_curve(k_max).into_iter().enumerate() {
        tv.push(vec![k.to_string(), num(v)]);
    }
    let mut mu = Table::new("chain_mu.csv", &["s", "a", "mu_sa"]);
    let na = exp.mdp.n_actions();
    for (j, m) in chain.mu_sa().iter().enumerate() {
        mu.push(vec![(j / na).to_string(), (j % na).to_string(), num(*m)]);
    }
    let p = "chain";
    summary.add(p, "", "joint_states", chain.len());
    summary.add_num(p, "", "beta", chain.beta());
    summary.add_num(p, "", "min_mu_sa", chain.mu_sa().iter().copied().fold(f64::INFINITY, f64::min));
    summary.add_num(p, "", "geo_c", profile.geo_c);
    summary.add_num(p, "", "geo_rho", profile.geo_rho);
    for &(delta, t) in &profile.t_delta_table {
        debug_assert!(DEFAULT_DELTA_GRID.contains(&delta));
        summary.add(p, &format!("delta={}", num(delta)), "t_delta", t.map(|t| t.to_string()).unwrap_or_default());
    }
    for alpha in sorted_alphas(exp) {
        let adv = stepsize_advisory(chain, alpha, 1.0)?;
        let key = alpha_key(alpha);
        summary.add(p, &key, "t_alpha", adv.t_alpha);
        summary.add_num(p, &key, "alpha_t_alpha", adv.lhs);
        summary.add_num(p, &key, "advisory_bound", adv.rhs);
        summary.add(p, &key, "admissible", adv.admissible);
    }
    Ok(vec![tv, mu])
}

fn convergence(exp: &Experiment, summary: &mut Summary) -> Result<Vec<Table>> {
    let spec = &exp.spec;
    let alphas = sorted_alphas(exp);
    let q_star = &exp.solution.q_star;
    let q_hi = shifted(q_star, spec.options.q0_offset);
    let runs: Vec<Vec<CoupledTrace>> = cells(alphas.len(), spec.replications, |i, r| {
        coupled_run(&exp.mdp, &exp.chain, alphas[i], &q_hi, q_star, rep_seed(exp, r), spec.n)
    })?;
    let stride = spec.n.div_ceil(MAX_CURVE_ROWS).max(1);
    let mut t = Table::new(
        "convergence.csv",
        &["alpha", "k", "mean_sq_w", "mean_lower_sup", "mean_upper_sup"],
    );
    let p = "convergence";
    for (alpha, traces) in alphas.iter().zip(&runs) {
        let reps = traces.len() as f64;
        let avg = |f: &dyn Fn(&CoupledTrace) -> f64| traces.iter().map(f).sum::<f64>() / reps;
        let mut ks: Vec<usize> = (0..=spec.n).step_by(stride).collect();
        if ks.last() != Some(&spec.n) {
            ks.push(spec.n);
        }
        for k in ks {
            t.push(vec![
                num(*alpha),
                k.to_string(),
                num(avg(&|c| c.w_sup[k].powi(2))),
                num(avg(&|c| c.lower_sup[k])),
                num(avg(&|c| c.upper_sup[k])),
            ]);
        }
        let key = alpha_key(*alpha);
        let violations: usize = traces.iter().map(|c| c.sandwich_violations).sum();
        let breach = traces.iter().map(|c| c.max_breach).fold(0.0, f64::max);
        summary.add(p, &key, "sandwich_violations", violations);
        summary.add_num(p, &key, "max_breach", breach);
        summary.add_num(p, &key, "eta_bound", 1.0 - (1.0 - exp.chain.beta()) * alpha / 2.0);
        let fit = fit_decay(traces, spec.options.decay_k_min)?;
        summary.add_num(p, &key, "eta_hat", fit.rate_eta);
        summary.add_num(p, &key, "log_linear_r2", fit.log_linear_r2);
        summary.add_num(p, &key, "above_fraction", fit.above_fraction);
        summary.add(p, &key, "fit_k_end", fit.k_range.1);
    }
    Ok(vec![t])
}

fn bias(exp: &Experiment, summary: &mut Summary) -> Result<Vec<Table>> {
    let spec = &exp.spec;
    let budget = BiasBudget {
        n: spec.n,
        k0: spec.bias_k0(),
        replications: spec.replications,
        master_seed: spec.master_seed,
        shared_stream: true,
    };
    let rep = empirical_bias(&exp.mdp, &exp.chain, &exp.solution, &spec.stepsizes, &budget)?;
    let mut pts = Table::new("bias.csv", &["alpha", "estimator", "coord", "bias", "se"]);
    for (label, points) in [("ta", &rep.empirical_points), ("rr", &rep.rr_points)] {
        for pt in points.iter() {
            for (c, (b, se)) in pt.bias.iter().zip(&pt.se).enumerate() {
                pts.push(vec![num(pt.alpha), label.into(), c.to_string(), num(*b), num(*se)]);
            }
        }
    }
    let mut slope = Table::new(
        "bias_slope.csv",
        &["coord", "s", "a", "q_star", "analytic_b", "fitted_slope", "slope_se", "free_slope", "free_intercept"],
    );
    let na = exp.mdp.n_actions();
    for c in 0..rep.q_star.len() {
        slope.push(vec![
            c.to_string(),
            (c / na).to_string(),
            (c % na).to_string(),
            num(rep.q_star[c]),
            opt_num(rep.analytic_b.as_ref().map(|b| b[c])),
            num(rep.fitted_slope[c]),
            num(rep.slope_se[c]),
            opt_num(rep.free_slope.as_ref().map(|s| s[c])),
            opt_num(rep.free_intercept.as_ref().map(|s| s[c])),
        ]);
    }
    let p = "bias";
    summary.add(p, "", "fitted_order", opt_num(rep.fitted_order));
    summary.add(p, "", "rr_order", opt_num(rep.rr_order));
    summary.add(p, "", "cosine_to_b", opt_num(rep.cosine_to_b));
    if let Some(b) = &rep.analytic_b {
        let diff: Vec<f64> = rep.fitted_slope.iter().zip(b).map(|(s, b)| s - b).collect();
        summary.add_num(p, "", "b_sup", sup_norm(b));
        summary.add_num(p, "", "slope_rel_sup_error", sup_norm(&diff) / sup_norm(b));
    }
    for pt in &rep.empirical_points {
        summary.add_num(p, &alpha_key(pt.alpha), "ta_l1_bias", pt.bias.iter().map(|v| v.abs()).sum());
    }
    for pt in &rep.rr_points {
        summary.add_num(p, &alpha_key(pt.alpha), "rr_l1_bias", pt.bias.iter().map(|v| v.abs()).sum());
    }
    Ok(vec![pts, slope])
}

fn clt(exp: &Experiment, summary: &mut Summary) -> Result<Vec<Table>> {
    let spec = &exp.spec;
    let (n, k0, batches) = (spec.n, spec.tail_k0(), spec.options.batches);
    let len = (n - k0) / batches;
    let mut points: Vec<usize> = (0..=batches).map(|b| k0 + b * len).collect();
    points.extend([n / 4, n / 2]);
    let alphas = sorted_alphas(exp);
    let q_star = &exp.solution.q_star;
    let traces: Vec<Vec<RunTrace>> = cells(alphas.len(), spec.replications, |i, r| {
        let opts = RunOptions::with_recording(Recording::At(points.clone()));
        run(&exp.mdp, &exp.chain, &Schedule::constant(alphas[i]), q_star, rep_seed(exp, r), n, &opts)
    })?;
    let mut sigma = Table::new("clt_sigma.csv", &["alpha", "row", "col", "sigma"]);
    let mut norm = Table::new("clt_normality.csv", &["alpha", "coord", "mean_hat", "skew_z", "kurtosis_z"]);
    let p = "clt";
    for (alpha, runs) in alphas.iter().zip(&traces) {
        let est = clt_covariance(&runs[0], k0, batches)?;
        let report = normality_check(&est.batch_means, spec.options.z_threshold)?;
        for (r, row) in est.sigma_hat.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                sigma.push(vec![num(*alpha), r.to_string(), c.to_string(), num(*v)]);
            }
        }
        for c in 0..est.mean_hat.len() {
            norm.push(vec![
                num(*alpha),
                c.to_string(),
                num(est.mean_hat[c]),
                num(report.skew_z[c]),
                num(report.kurtosis_z[c]),
            ]);
        }
        let key = alpha_key(*alpha);
        let max_z = report.skew_z.iter().chain(&report.kurtosis_z).fold(0.0_f64, |m, z| m.max(z.abs()));
        summary.add(p, &key, "batch_len", est.batch_len);
        summary.add_num(p, &key, "sigma_trace", (0..est.sigma_hat.len()).map(|i| est.sigma_hat[i][i]).sum());
        summary.add_num(p, &key, "max_abs_z", max_z);
        summary.add(p, &key, "normality_pass", report.pass);
        if runs.len() >= 2 && n / 4 >= 1 {
            let ratio = tail_variance(runs, n)? / tail_variance(runs, n / 2)?;
            summary.add_num(p, &key, "var_ratio_2k_over_k", ratio);
            let d = mse_decomposition(runs, q_star, &est.mean_hat, n / 2, n)?;
            summary.add_num(p, &key, "mse_optimization_sq", d.optimization_sq);
            summary.add_num(p, &key, "mse_bias_sq", d.bias_sq);
            summary.add_num(p, &key, "mse_variance", d.variance);
            summary.add_num(p, &key, "mse_direct", d.mse_direct);
        }
    }
    Ok(vec![sigma, norm])
}

fn rr(exp: &Experiment, summary: &mut Summary) -> Result<Vec<Table>> {
    let spec = &exp.spec;
    let (n, k0) = (spec.n, spec.tail_k0());
    let pairs = spec.rr_pairs();
    let mut alphas: Vec<f64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let q_star = &exp.solution.q_star;
    let q0 = shifted(q_star, spec.options.q0_offset);
    let tails: Vec<Vec<Vec<f64>>> = cells(alphas.len(), spec.replications, |i, r| {
        let opts = RunOptions::with_recording(Recording::At(vec![k0]));
        let trace = run(&exp.mdp, &exp.chain, &Schedule::constant(alphas[i]), &q0, rep_seed(exp, r), n, &opts)?;
        tail_average(&trace, k0, n)
    })?;
    let at = |a: f64| alphas.iter().position(|&x| x == a).expect("pair member");
    let mut t = Table::new("rr.csv", &["alpha", "estimator", "l1_error", "l1_error_se", "l1_bias"]);
    let p = "rr";
    for (a, b) in pairs {
        let (ta, tb) = (&tails[at(a)], &tails[at(b)]);
        let rr: Vec<Vec<f64>> = ta
            .iter()
            .zip(tb)
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| 2.0 * u - v).collect())
            .collect();
        for (label, est) in [("ta", ta), ("ta_double", tb), ("rr", &rr)] {
            let errs: Vec<f64> = est.iter().map(|q| l1_dist(q, q_star)).collect();
            let mean_q = crate::stats::mean_vec(est);
            let bias = l1_dist(&mean_q, q_star);
            t.push(vec![num(a), label.into(), num(mean(&errs)), num(std_error(&errs)), num(bias)]);
            summary.add_num(p, &alpha_key(a), &format!("{label}_l1_bias"), bias);
        }
    }
    Ok(vec![t])
}

/// Tail average and last iterate at one checkpoint.
type Snapshot = (Vec<f64>, Vec<f64>);

/// Log-spaced even checkpoints in `[min(100, n), n]`, plus `10⁴` when it fits.
pub fn checkpoints(n: usize, count: usize) -> Vec<usize> {
    let lo = n.clamp(2, 100) as f64;
    let hi = n as f64;
    let mut ks: Vec<usize> = (0..count)
        .map(|i| {
            let t = if count > 1 { i as f64 / (count - 1) as f64 } else { 1.0 };
            (lo * (hi / lo).powf(t)).round() as usize
        })
        .collect();
    if n >= 10_000 {
        ks.push(10_000);
    }
    ks.push(n);
    for k in ks.iter_mut() {
        *k = (*k).clamp(2, n);
    }
    ks.sort_unstable();
    ks.dedup();
    ks
}

/// Mean `ℓ1` errors of `q̄_{k/2,k}` (and of `q_k` for non-constant
/// schedules) at each checkpoint, plus RR for every `(α, 2α)` pair.
fn figure_table(
    exp: &Experiment,
    file: &str,
    pipeline: &str,
    target: &[f64],
    summary: &mut Summary,
    run_one: impl Fn(&Schedule, u64, &RunOptions) -> Result<RunTrace> + Sync,
) -> Result<Table> {
    let spec = &exp.spec;
    let alphas = sorted_alphas(exp);
    let schedules: Vec<Schedule> =
        alphas.iter().map(|&a| Schedule::constant(a)).chain(spec.schedules.iter().copied()).collect();
    let ks = checkpoints(spec.n, spec.options.checkpoints);
    let record: Vec<usize> = ks.iter().flat_map(|&k| [k / 2, k]).collect();
    // per[schedule][rep][checkpoint] = (tail average, iterate)
    let per: Vec<Vec<Vec<Snapshot>>> = cells(schedules.len(), spec.replications, |i, r| {
        let opts = RunOptions::with_recording(Recording::At(record.clone()));
        let trace = run_one(&schedules[i], rep_seed(exp, r), &opts)?;
        ks.iter()
            .map(|&k| Ok((tail_average(&trace, k / 2, k)?, trace.iterate_at(k)?.to_vec())))
            .collect::<Result<Vec<_>>>()
    })?;
    let mean_err = |vs: &mut dyn Iterator<Item = Vec<f64>>| -> f64 {
        let errs: Vec<f64> = vs.map(|v| l1_dist(&v, target)).collect();
        mean(&errs)
    };
    let mut t = Table::new(file, &["k", "schedule_id", "alpha", "metric", "value"]);
    let last_k = ks.len() - 1;
    let k_1e4 = ks.iter().position(|&k| k == 10_000);
    for (i, sched) in schedules.iter().enumerate() {
        let id = sched.id();
        let alpha = sched.constant_alpha();
        let alpha_col = opt_num(alpha);
        let mut metrics: Vec<(&str, Vec<f64>)> = Vec::new();
        let ta: Vec<f64> =
            (0..ks.len()).map(|c| mean_err(&mut per[i].iter().map(|rep| rep[c].0.clone()))).collect();
        metrics.push(("ta", ta));
        if let Some(a) = alpha {
            if let Some(j) = alphas.iter().position(|&b| (b - 2.0 * a).abs() <= 1e-12 * b) {
                let rr: Vec<f64> = (0..ks.len())
                    .map(|c| {
                        mean_err(&mut per[i].iter().zip(&per[j]).map(|(x, y)| {
                            x[c].0.iter().zip(&y[c].0).map(|(u, v)| 2.0 * u - v).collect()
                        }))
                    })
                    .collect();
                metrics.push(("rr", rr));
            }
        } else {
            let last: Vec<f64> =
                (0..ks.len()).map(|c| mean_err(&mut per[i].iter().map(|rep| rep[c].1.clone()))).collect();
            metrics.push(("last", last));
        }
        for (metric, values) in &metrics {
            for (k, v) in ks.iter().zip(values) {
                t.push(vec![k.to_string(), id.clone(), alpha_col.clone(), metric.to_string(), num(*v)]);
            }
            summary.add_num(pipeline, &id, &format!("final_{metric}"), values[last_k]);
            if let Some(c) = k_1e4 {
                summary.add_num(pipeline, &id, &format!("{metric}_at_1e4"), values[c]);
            }
        }
    }
    Ok(t)
}

fn figure1(exp: &Experiment, summary: &mut Summary) -> Result<Vec<Table>> {
    let q_star = exp.solution.q_star.clone();
    let q0 = shifted(&q_star, exp.spec.options.q0_offset);
    let t = figure_table(exp, "figure1.csv", "figure1", &q_star, summary, |s, seed, opts| {
        run(&exp.mdp, &exp.chain, s, &q0, seed, exp.spec.n, opts)
    })?;
    Ok(vec![t])
}

fn lfa(exp: &Experiment, summary: &mut Summary) -> Result<Vec<Table>> {
    let features = exp.features.as_ref().ok_or(QsaError::InvalidConfig("lfa needs features".into()))?;
    let pvi = projected_value_iteration(&exp.mdp, features, Some(exp.chain.mu_sa()), PVI_TOL)?;
    summary.add_num("lfa", "", "pvi_residual", pvi.residual);
    summary.add("lfa", "", "pvi_iterations", pvi.iterations);
    let mut theta_t = Table::new("lfa_theta.csv", &["coord", "theta_star"]);
    for (c, v) in pvi.theta.iter().enumerate() {
        theta_t.push(vec![c.to_string(), num(*v)]);
    }
    let theta0 = shifted(&pvi.theta, exp.spec.options.q0_offset);
    let t = figure_table(exp, "lfa.csv", "lfa", &pvi.theta, summary, |s, seed, opts| {
        lfa_run(&exp.mdp, &exp.chain, features, s, &theta0, seed, exp.spec.n, opts)
    })?;
    Ok(vec![t, theta_t])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_grid() {
        let ks = checkpoints(100_000, 5);
        assert_eq!(ks.first(), Some(&100));
        assert_eq!(ks.last(), Some(&100_000));
        assert!(ks.contains(&10_000));
        assert!(ks.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(checkpoints(3, 4), vec![3]);
    }
}
