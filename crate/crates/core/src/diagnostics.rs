//! Post-processing of completed runs: batch-means CLT covariance, moment
//! normality checks, geometric decay fits, stationarity (BAR) residuals and
//! the bias/variance/optimization split of the tail-average error.

use crate::chain::JointChain;
use crate::coupling::CoupledTrace;
use crate::engine::{run_observed, tail_average, Mode, RunOptions, RunTrace, Schedule, StartOpt, StepObserver};
use crate::error::{QsaError, Result};
use crate::mdp::Mdp;
use crate::stats::{covariance, linear_fit, mean, mean_vec, r_squared, sq_dist, std_error, variance};

pub const MIN_BATCHES: usize = 20;
pub const DEFAULT_BATCHES: usize = 50;
pub const DEFAULT_Z_THRESHOLD: f64 = 4.0;

/// Per-coordinate moment z-scores of a sample of batch means.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalityReport {
    pub skew_z: Vec<f64>,
    pub kurtosis_z: Vec<f64>,
    /// Coordinates whose batch means have zero spread; their z-scores are 0.
    pub zero_variance: Vec<bool>,
    pub threshold: f64,
    pub pass: bool,
}

/// Skewness and excess kurtosis against their null standard errors
/// `√(6/m)` and `√(24/m)`; passes when every `|z| ≤ threshold`.
pub fn normality_check(batch_means: &[Vec<f64>], threshold: f64) -> Result<NormalityReport> {
    let m = batch_means.len();
    if m < MIN_BATCHES {
        return Err(QsaError::TooFewBatches { min: MIN_BATCHES, got: m });
    }
    let d = batch_means[0].len();
    let (se_skew, se_kurt) = ((6.0 / m as f64).sqrt(), (24.0 / m as f64).sqrt());
    let mut skew_z = vec![0.0; d];
    let mut kurtosis_z = vec![0.0; d];
    let mut zero_variance = vec![false; d];
    for c in 0..d {
        let xs: Vec<f64> = batch_means.iter().map(|b| b[c]).collect();
        let mu = mean(&xs);
        let m2 = xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / m as f64;
        if m2 <= f64::EPSILON * mu.abs().max(1.0) * f64::EPSILON {
            zero_variance[c] = true;
            continue;
        }
        let m3 = xs.iter().map(|x| (x - mu).powi(3)).sum::<f64>() / m as f64;
        let m4 = xs.iter().map(|x| (x - mu).powi(4)).sum::<f64>() / m as f64;
        skew_z[c] = m3 / m2.powf(1.5) / se_skew;
        kurtosis_z[c] = (m4 / (m2 * m2) - 3.0) / se_kurt;
    }
    let pass = skew_z.iter().chain(&kurtosis_z).all(|z| z.abs() <= threshold);
    Ok(NormalityReport { skew_z, kurtosis_z, zero_variance, threshold, pass })
}

/// Batch-means estimate of the long-run covariance of the iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct CltEstimate {
    /// `batch_len · Cov(batch means)`.
    pub sigma_hat: Vec<Vec<f64>>,
    pub batch_count: usize,
    pub batch_len: usize,
    pub mean_hat: Vec<f64>,
    pub batch_means: Vec<Vec<f64>>,
    pub normality: NormalityReport,
}

/// Splits `q_{k0}, …, q_{n−1}` into `batches` equal batches. Batch
/// boundaries must be recorded points of the trace.
pub fn clt_covariance(trace: &RunTrace, k0: usize, batches: usize) -> Result<CltEstimate> {
    if batches < MIN_BATCHES {
        return Err(QsaError::TooFewBatches { min: MIN_BATCHES, got: batches });
    }
    if k0 >= trace.n {
        return Err(QsaError::InvalidRange(format!("burn-in {k0} ≥ run length {}", trace.n)));
    }
    let span = trace.n - k0;
    if !span.is_multiple_of(batches) {
        return Err(QsaError::InvalidRange(format!("{span} post-burn-in iterates do not split into {batches} equal batches")));
    }
    let len = span / batches;
    let batch_means = (0..batches)
        .map(|b| tail_average(trace, k0 + b * len, k0 + (b + 1) * len))
        .collect::<Result<Vec<_>>>()?;
    let cov = covariance(&batch_means);
    let sigma_hat = cov.iter().map(|row| row.iter().map(|v| v * len as f64).collect()).collect();
    let normality = normality_check(&batch_means, DEFAULT_Z_THRESHOLD)?;
    Ok(CltEstimate {
        sigma_hat,
        batch_count: batches,
        batch_len: len,
        mean_hat: mean_vec(&batch_means),
        batch_means,
        normality,
    })
}

/// Geometric fit `E‖w_k‖∞² ≈ e^{intercept} η̂^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayFit {
    pub rate_eta: f64,
    pub log_linear_r2: f64,
    pub intercept: f64,
    /// Fitted index range `[k_min, k_end)`.
    pub k_range: (usize, usize),
    /// Share of fitted points lying above the fitted line.
    pub above_fraction: f64,
}

/// Values below this are treated as the numerical floor.
pub const DECAY_FLOOR: f64 = 1e-24;

/// Fits `log m_k` on `k` over `[k_min, first k with m_k < 1e-24)`, where
/// `m_k` is a mean squared distance.
pub fn fit_decay_series(m: &[f64], k_min: usize) -> Result<DecayFit> {
    let k_end = m
        .iter()
        .enumerate()
        .skip(k_min)
        .find(|(_, v)| **v < DECAY_FLOOR)
        .map_or(m.len(), |(k, _)| k);
    if k_end < k_min + 3 {
        return Err(QsaError::InsufficientDecay(format!("only {} usable points", k_end.saturating_sub(k_min))));
    }
    let floor_reached = k_end < m.len();
    if !floor_reached && m[k_end - 1] > 1e-2 * m[k_min] {
        return Err(QsaError::InsufficientDecay(format!(
            "mean squared distance only fell from {} to {}",
            m[k_min],
            m[k_end - 1]
        )));
    }
    let pts: Vec<(f64, f64)> = (k_min..k_end).map(|k| (k as f64, m[k].ln())).collect();
    let (slope, intercept) = linear_fit(&pts);
    let r2 = r_squared(&pts, slope, intercept);
    let above = pts.iter().filter(|(k, y)| *y > slope * k + intercept + 1e-12).count();
    Ok(DecayFit {
        rate_eta: slope.exp(),
        log_linear_r2: r2,
        intercept,
        k_range: (k_min, k_end),
        above_fraction: above as f64 / pts.len() as f64,
    })
}

/// Averages `‖w_k‖∞²` over coupled replications and fits its decay rate.
pub fn fit_decay(coupled: &[CoupledTrace], k_min: usize) -> Result<DecayFit> {
    let len = coupled.iter().map(|c| c.w_sup.len()).min().ok_or(QsaError::MissingTrajectory)?;
    let r = coupled.len() as f64;
    let m: Vec<f64> = (0..len).map(|k| coupled.iter().map(|c| c.w_sup[k].powi(2)).sum::<f64>() / r).collect();
    fit_decay_series(&m, k_min)
}

/// Running sums for the stationarity check
/// `E[q_k 1{x_k = i}] = E[q_{k+1} 1{x_{k+1} = i}]`.
#[derive(Debug, Clone)]
pub struct BarAccumulator {
    d: usize,
    steps: usize,
    batch_len: usize,
    /// `diff[i]`: running `Σ q_k 1{x_k=i} − q_{k+1} 1{x_{k+1}=i}`.
    diff: Vec<Vec<f64>>,
    batch_start: Vec<Vec<f64>>,
    batch_sums: Vec<Vec<Vec<f64>>>,
    seen: usize,
}

impl BarAccumulator {
    /// Expects exactly `steps` pushes, split into `batches` batches for the
    /// standard errors.
    pub fn new(n_x: usize, d: usize, steps: usize, batches: usize) -> Result<Self> {
        if batches < 2 || steps < batches {
            return Err(QsaError::TooFewBatches { min: 2, got: batches.min(steps) });
        }
        Ok(Self {
            d,
            steps,
            batch_len: steps / batches,
            diff: vec![vec![0.0; d]; n_x],
            batch_start: vec![vec![0.0; d]; n_x],
            batch_sums: vec![Vec::with_capacity(batches); n_x],
            seen: 0,
        })
    }

    pub fn push(&mut self, x: usize, x_next: usize, q: &[f64], q_next: &[f64]) {
        for c in 0..self.d {
            self.diff[x][c] += q[c];
            self.diff[x_next][c] -= q_next[c];
        }
        self.seen += 1;
        if self.seen.is_multiple_of(self.batch_len) && self.seen / self.batch_len <= self.steps / self.batch_len {
            for (i, d) in self.diff.iter().enumerate() {
                let sum: Vec<f64> = d.iter().zip(&self.batch_start[i]).map(|(a, b)| a - b).collect();
                self.batch_sums[i].push(sum);
                self.batch_start[i].clone_from(d);
            }
        }
    }

    pub fn finish(self) -> BarReport {
        let scale = self.seen.max(1) as f64;
        let residuals = self.diff.iter().map(|d| d.iter().fold(0.0, |m: f64, v| m.max(v.abs())) / scale).collect();
        let len = self.batch_len as f64;
        let se = self
            .batch_sums
            .iter()
            .map(|sums| {
                (0..self.d)
                    .map(|c| {
                        let xs: Vec<f64> = sums.iter().map(|s| s[c] / len).collect();
                        std_error(&xs)
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        BarReport { residuals, se, steps: self.seen }
    }
}

/// Per-joint-state residual `‖avg q_k 1{x_k=i} − avg q_{k+1} 1{x_{k+1}=i}‖∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct BarReport {
    pub residuals: Vec<f64>,
    pub se: Vec<f64>,
    pub steps: usize,
}

impl BarReport {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

struct BarObserver {
    acc: BarAccumulator,
    q: Vec<f64>,
    k0: usize,
}

impl StepObserver for BarObserver {
    fn observe(&mut self, k: usize, x: usize, x_next: usize, q_next: &[f64], changed: usize, old: f64) {
        if k >= self.k0 {
            self.q[changed] = old;
            self.acc.push(x, x_next, &self.q, q_next);
        }
        self.q[changed] = q_next[changed];
    }
}

/// Replays a constant-stepsize tabular trace and measures the BAR residual
/// over steps `k ≥ k0`.
pub fn bar_residual(trace: &RunTrace, mdp: &Mdp, chain: &JointChain, k0: usize) -> Result<BarReport> {
    let schedule = match (trace.mode, trace.schedule) {
        (Mode::Tabular, Some(s @ Schedule::Constant { .. })) => s,
        _ => return Err(QsaError::MissingTrajectory),
    };
    if k0 >= trace.n {
        return Err(QsaError::InvalidRange(format!("burn-in {k0} ≥ run length {}", trace.n)));
    }
    let acc = BarAccumulator::new(chain.len(), mdp.dim(), trace.n - k0, DEFAULT_BATCHES)?;
    let mut obs = BarObserver { acc, q: trace.q0.clone(), k0 };
    let opts = RunOptions { start: StartOpt(trace.start), recording: crate::engine::Recording::At(Vec::new()) };
    let replay = run_observed(mdp, chain, &schedule, &trace.q0, trace.seed, trace.n, &opts, &mut obs)?;
    if replay.final_iterate() != trace.final_iterate() {
        return Err(QsaError::MissingTrajectory);
    }
    Ok(obs.acc.finish())
}

/// The three terms of `E‖q̄ − q*‖² ≈ optimization + bias² + variance`.
#[derive(Debug, Clone, PartialEq)]
pub struct MseDecomposition {
    /// `‖mean of window averages − mean_hat‖²`.
    pub optimization_sq: f64,
    /// `‖mean_hat − q*‖²`.
    pub bias_sq: f64,
    /// Trace of the across-seed covariance of the window averages.
    pub variance: f64,
    /// Directly estimated `mean ‖q̄ − q*‖²`, for comparison.
    pub mse_direct: f64,
}

/// Decomposes the error of `q̄_{k0,k}` across seeds. `mean_hat` is an
/// estimate of `E[q_∞]`, ideally from separate longer runs.
pub fn mse_decomposition(
    traces: &[RunTrace],
    q_star: &[f64],
    mean_hat: &[f64],
    k0: usize,
    k: usize,
) -> Result<MseDecomposition> {
    if traces.len() < 2 {
        return Err(QsaError::InvalidConfig("error decomposition needs at least two seeds".into()));
    }
    let avgs = traces.iter().map(|t| tail_average(t, k0, k)).collect::<Result<Vec<_>>>()?;
    let window_mean = mean_vec(&avgs);
    let variance = (0..q_star.len())
        .map(|c| variance(&avgs.iter().map(|a| a[c]).collect::<Vec<_>>()))
        .sum();
    Ok(MseDecomposition {
        optimization_sq: sq_dist(&window_mean, mean_hat),
        bias_sq: sq_dist(mean_hat, q_star),
        variance,
        mse_direct: mean(&avgs.iter().map(|a| sq_dist(a, q_star)).collect::<Vec<_>>()),
    })
}

/// Mean of the tail averages `q̄_{k0,n+1}` over several traces.
pub fn stationary_mean(traces: &[RunTrace], k0: usize) -> Result<Vec<f64>> {
    if traces.is_empty() {
        return Err(QsaError::MissingTrajectory);
    }
    let avgs = traces.iter().map(|t| tail_average(t, k0, t.n + 1)).collect::<Result<Vec<_>>>()?;
    Ok(mean_vec(&avgs))
}

/// `Σ_c Var_seeds(q̄_{k/2,k}[c])`, the total across-seed variance of the
/// tail average at window end `k`.
pub fn tail_variance(traces: &[RunTrace], k: usize) -> Result<f64> {
    let avgs = traces.iter().map(|t| tail_average(t, k / 2, k)).collect::<Result<Vec<_>>>()?;
    let d = avgs.first().ok_or(QsaError::MissingTrajectory)?.len();
    Ok((0..d).map(|c| variance(&avgs.iter().map(|a| a[c]).collect::<Vec<_>>())).sum())
}
