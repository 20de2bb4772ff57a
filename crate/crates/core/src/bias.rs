//! First-order bias `E[q_∞] = q* + αB + O(α²)` of constant-stepsize
//! Q-learning: local linearization at `q*`, the analytic vector `B`, and its
//! Monte Carlo counterpart.

use nalgebra::{DMatrix, DVector, Schur};
use rayon::prelude::*;

use crate::chain::{mixing_time, JointChain, Triple};
use crate::engine::{run, run_observed, tail_average, Recording, RunOptions, Schedule, StepObserver};
use crate::error::{QsaError, Result};
use crate::mdp::{argmax, max_over_actions, Mdp, OptimalSolution};
use crate::stats::{cosine, derive_seed, linear_fit, mean, origin_fit, std_error};

/// Smallest admissible distance of the eigenvalues of `Σ_x μ(x) G(x)` from 1.
pub const EIG_GAP_MIN: f64 = 1e-8;
const SOLVE_RESIDUAL_MAX: f64 = 1e-10;
const SCHUR_EPS: f64 = 1e-14;
const SCHUR_MAX_ITERS: usize = 100_000;

/// `G_{q*}(x)` for every joint state, stored by its single non-identity row.
///
/// For `x = (s₀,a₀,s₁)` the row `j(x) = (s₀,a₀)` of `G(x)` is `γ` at column
/// `c(x) = (s₁, a*_{s₁})` and zero elsewhere; every other row is an identity
/// row. `A(x) = G(x) − I` and `b(x) = F(x,q*) − A(x)q*` are supported on
/// row `j(x)` only.
#[derive(Debug, Clone)]
pub struct Linearization {
    d: usize,
    gamma: f64,
    triples: Vec<Triple>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    /// `F(x,q*)` at row `j(x)`.
    h: Vec<f64>,
    b: Vec<f64>,
    mu: Vec<f64>,
    a_star: Vec<usize>,
    q_star: Vec<f64>,
    pub a_bar: DMatrix<f64>,
    pub eig_gap: f64,
}

/// Builds the linearization; requires a unique optimal action everywhere.
pub fn linearize(mdp: &Mdp, chain: &JointChain, solution: &OptimalSolution) -> Result<Linearization> {
    if !(solution.gap_delta > 0.0) {
        return Err(QsaError::AssumptionViolated { gap: solution.gap_delta });
    }
    linearize_allowing_ties(mdp, chain, solution)
}

/// Same as [`linearize`] but resolves tied optimal actions to the lowest
/// index instead of refusing. The remainder bound is then vacuous.
pub fn linearize_allowing_ties(mdp: &Mdp, chain: &JointChain, solution: &OptimalSolution) -> Result<Linearization> {
    let d = mdp.dim();
    if solution.q_star.len() != d {
        return Err(QsaError::DimensionMismatch { expected: d, got: solution.q_star.len() });
    }
    if chain.n_states() != mdp.n_states() || chain.n_actions() != mdp.n_actions() {
        return Err(QsaError::InvalidConfig("chain was built for a different MDP".into()));
    }
    let na = mdp.n_actions();
    let gamma = mdp.gamma();
    let q = &solution.q_star;
    let a_star: Vec<usize> = (0..mdp.n_states()).map(|s| argmax(&q[s * na..(s + 1) * na]).0).collect();
    let triples = chain.states_x().to_vec();
    let mu = chain.mu_x().to_vec();
    let mut rows = Vec::with_capacity(triples.len());
    let mut cols = Vec::with_capacity(triples.len());
    let mut h = Vec::with_capacity(triples.len());
    let mut b = Vec::with_capacity(triples.len());
    let mut a_bar = DMatrix::<f64>::zeros(d, d);
    for (t, &m) in triples.iter().zip(&mu) {
        let j = t.s * na + t.a;
        let c = t.next * na + a_star[t.next];
        let f = mdp.rewards()[j] + gamma * max_over_actions(q, t.next, na) - q[j];
        rows.push(j);
        cols.push(c);
        h.push(f);
        b.push(f - (gamma * q[c] - q[j]));
        a_bar[(j, c)] += m * gamma;
        a_bar[(j, j)] -= m;
    }
    let mean_g = &a_bar + DMatrix::identity(d, d);
    let schur = Schur::try_new(mean_g, SCHUR_EPS, SCHUR_MAX_ITERS)
        .ok_or(QsaError::SingularLinearization { eig_gap: f64::NAN })?;
    let eig_gap = schur
        .complex_eigenvalues()
        .iter()
        .map(|z| ((z.re - 1.0).powi(2) + z.im.powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min);
    if !(eig_gap > EIG_GAP_MIN) {
        return Err(QsaError::SingularLinearization { eig_gap });
    }
    Ok(Linearization {
        d,
        gamma,
        triples,
        rows,
        cols,
        h,
        b,
        mu,
        a_star,
        q_star: q.clone(),
        a_bar,
        eig_gap,
    })
}

impl Linearization {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn triple(&self, i: usize) -> Triple {
        self.triples[i]
    }

    /// The point the linearization is taken at.
    pub fn q_star(&self) -> &[f64] {
        &self.q_star
    }

    /// Greedy action per state used for the `γ` column.
    pub fn a_star(&self) -> &[usize] {
        &self.a_star
    }

    pub fn g_matrix(&self, i: usize) -> DMatrix<f64> {
        let mut g = DMatrix::identity(self.d, self.d);
        let j = self.rows[i];
        g.row_mut(j).fill(0.0);
        g[(j, self.cols[i])] = self.gamma;
        g
    }

    pub fn a_matrix(&self, i: usize) -> DMatrix<f64> {
        self.g_matrix(i) - DMatrix::identity(self.d, self.d)
    }

    pub fn b_vector(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        v[self.rows[i]] = self.b[i];
        v
    }

    /// `F(x, q*)` as a full vector.
    pub fn h_vector(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.d];
        v[self.rows[i]] = self.h[i];
        v
    }

    /// `R(x,q) = F(x,q) − F(x,q*) − A(x)(q − q*)`, which reduces to
    /// `γ (max_a q(s₁,a) − q(s₁,a*))` in row `j(x)`.
    pub fn remainder(&self, i: usize, q: &[f64]) -> Vec<f64> {
        let na = self.d / self.a_star.len();
        let t = self.triples[i];
        let c = self.cols[i];
        let mut r = vec![0.0; self.d];
        r[self.rows[i]] = self.gamma * (max_over_actions(q, t.next, na) - q[c]);
        r
    }
}

/// `B = −μ_X D̄ (I − P̂ + Π)⁻¹ (P̂ − Π) h` with `h(x) = F(x,q*)` and
/// `(D̄f)(x) = Ā⁻¹A(x)f(x)`.
///
/// The operators act on functions `X → R^d` as `kernel ⊗ I_d`, so the
/// fundamental-matrix solve is done on `|X| × d` right-hand sides.
pub fn analytic_bias(lin: &Linearization, chain: &JointChain) -> Result<Vec<f64>> {
    let nx = lin.len();
    if chain.len() != nx {
        return Err(QsaError::DimensionMismatch { expected: nx, got: chain.len() });
    }
    let p_hat = chain.reversed_p_hat();
    let mu = &lin.mu;
    let d = lin.d;
    // H[y, ·] = h(y), nonzero only at column j(y)
    let mut hmat = DMatrix::<f64>::zeros(nx, d);
    for y in 0..nx {
        hmat[(y, lin.rows[y])] = lin.h[y];
    }
    let diff = DMatrix::from_fn(nx, nx, |i, j| p_hat[(i, j)] - mu[j]);
    let fundamental = DMatrix::from_fn(nx, nx, |i, j| if i == j { 1.0 } else { 0.0 } - diff[(i, j)]);
    let rhs = &diff * &hmat;
    let v = fundamental
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or(QsaError::SingularFundamentalMatrix)?;
    let residual = (&fundamental * &v - &rhs).amax();
    if !(residual <= SOLVE_RESIDUAL_MAX * rhs.amax().max(1.0)) {
        return Err(QsaError::SingularFundamentalMatrix);
    }
    // u = Σ_x μ(x) A(x) v(x)
    let mut u = DVector::<f64>::zeros(d);
    for x in 0..nx {
        let j = lin.rows[x];
        u[j] += mu[x] * (lin.gamma * v[(x, lin.cols[x])] - v[(x, j)]);
    }
    let sol = lin
        .a_bar
        .clone()
        .lu()
        .solve(&u)
        .ok_or(QsaError::SingularLinearization { eig_gap: lin.eig_gap })?;
    Ok(sol.iter().map(|v| -v).collect())
}

/// `B′ = B Bᵀ`, the leading coefficient of the squared bias.
pub fn b_prime(b: &[f64]) -> Vec<Vec<f64>> {
    b.iter().map(|x| b.iter().map(|y| x * y).collect()).collect()
}

/// Monte Carlo budget for [`empirical_bias`].
#[derive(Debug, Clone, PartialEq)]
pub struct BiasBudget {
    pub n: usize,
    /// Burn-in; `None` picks `max(t_{α²}, n/2)` per stepsize.
    pub k0: Option<usize>,
    pub replications: usize,
    pub master_seed: u64,
    /// Drive every stepsize of a replication with the same data stream.
    pub shared_stream: bool,
}

impl BiasBudget {
    pub fn new(n: usize, replications: usize, master_seed: u64) -> Self {
        Self { n, k0: None, replications, master_seed, shared_stream: true }
    }
}

/// Mean bias and its standard error at one stepsize.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasPoint {
    pub alpha: f64,
    pub bias: Vec<f64>,
    pub se: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub q_star: Vec<f64>,
    pub analytic_b: Option<Vec<f64>>,
    /// Sorted by α.
    pub empirical_points: Vec<BiasPoint>,
    /// Per-coordinate through-origin slope of bias on α, averaged over
    /// replications.
    pub fitted_slope: Vec<f64>,
    pub slope_se: Vec<f64>,
    /// Free-intercept regression; `None` with fewer than two stepsizes.
    pub free_slope: Option<Vec<f64>>,
    pub free_intercept: Option<Vec<f64>>,
    /// Slope of `log ‖bias‖₁` on `log α`.
    pub fitted_order: Option<f64>,
    pub b_prime: Option<Vec<Vec<f64>>>,
    /// RR bias `2q̄(α) − q̄(2α) − q*`, for every α whose double is also on the grid.
    pub rr_points: Vec<BiasPoint>,
    pub rr_order: Option<f64>,
    /// Cosine similarity between `fitted_slope` and `B`.
    pub cosine_to_b: Option<f64>,
}

/// Aggregates tail averages `tail[α-index][replication]` into a report.
pub fn summarize_bias(
    q_star: &[f64],
    alphas: &[f64],
    tail: &[Vec<Vec<f64>>],
    analytic_b: Option<Vec<f64>>,
) -> Result<BiasReport> {
    if alphas.is_empty() || tail.len() != alphas.len() {
        return Err(QsaError::InvalidConfig("need one group of tail averages per stepsize".into()));
    }
    let reps = tail[0].len();
    if reps == 0 || tail.iter().any(|t| t.len() != reps) {
        return Err(QsaError::InvalidConfig("every stepsize needs the same positive number of replications".into()));
    }
    let d = q_star.len();
    let mut order: Vec<usize> = (0..alphas.len()).collect();
    order.sort_by(|&a, &b| alphas[a].total_cmp(&alphas[b]));
    let sorted_alphas: Vec<f64> = order.iter().map(|&i| alphas[i]).collect();
    // bias[α][rep][coord]
    let bias: Vec<Vec<Vec<f64>>> = order
        .iter()
        .map(|&i| tail[i].iter().map(|q| q.iter().zip(q_star).map(|(a, b)| a - b).collect()).collect())
        .collect();

    let point = |alpha: f64, samples: &[Vec<f64>]| -> BiasPoint {
        let (bias, se) = (0..d)
            .map(|c| {
                let xs: Vec<f64> = samples.iter().map(|v| v[c]).collect();
                (mean(&xs), std_error(&xs))
            })
            .unzip();
        BiasPoint { alpha, bias, se }
    };
    let empirical_points: Vec<BiasPoint> =
        sorted_alphas.iter().zip(&bias).map(|(&a, samples)| point(a, samples)).collect();

    let per_rep = |c: usize, r: usize| -> Vec<(f64, f64)> {
        sorted_alphas.iter().zip(&bias).map(|(&a, b)| (a, b[r][c])).collect()
    };
    let mut fitted_slope = vec![0.0; d];
    let mut slope_se = vec![0.0; d];
    for c in 0..d {
        let slopes: Vec<f64> = (0..reps).map(|r| origin_fit(&per_rep(c, r))).collect();
        fitted_slope[c] = mean(&slopes);
        slope_se[c] = std_error(&slopes);
    }
    let (free_slope, free_intercept) = if sorted_alphas.len() >= 2 {
        let mut s = vec![0.0; d];
        let mut i = vec![0.0; d];
        for c in 0..d {
            let fits: Vec<(f64, f64)> = (0..reps).map(|r| linear_fit(&per_rep(c, r))).collect();
            s[c] = fits.iter().map(|f| f.0).sum::<f64>() / reps as f64;
            i[c] = fits.iter().map(|f| f.1).sum::<f64>() / reps as f64;
        }
        (Some(s), Some(i))
    } else {
        (None, None)
    };
    let fitted_order = log_log_order(&empirical_points);

    let mut rr_points = Vec::new();
    for (i, &a) in sorted_alphas.iter().enumerate() {
        if let Some(j) = sorted_alphas.iter().position(|&b| (b - 2.0 * a).abs() <= 1e-12 * b) {
            let samples: Vec<Vec<f64>> = (0..reps)
                .map(|r| (0..d).map(|c| 2.0 * bias[i][r][c] - bias[j][r][c]).collect())
                .collect();
            rr_points.push(point(a, &samples));
        }
    }
    let rr_order = log_log_order(&rr_points);
    let cosine_to_b = analytic_b.as_ref().map(|b| cosine(&fitted_slope, b));
    let b_prime = analytic_b.as_deref().map(b_prime);
    Ok(BiasReport {
        q_star: q_star.to_vec(),
        analytic_b,
        empirical_points,
        fitted_slope,
        slope_se,
        free_slope,
        free_intercept,
        fitted_order,
        b_prime,
        rr_points,
        rr_order,
        cosine_to_b,
    })
}

fn log_log_order(points: &[BiasPoint]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.alpha.ln(), p.bias.iter().map(|v| v.abs()).sum::<f64>().ln()))
        .collect();
    Some(linear_fit(&pts).0)
}

/// Burn-in used by [`empirical_bias`] when the budget leaves it open.
pub fn default_burn_in(chain: &JointChain, alpha: f64, n: usize) -> usize {
    let t = mixing_time(chain, alpha * alpha, n).unwrap_or(n);
    t.max(n / 2)
}

/// Runs every `(α, replication)` cell from `q0 = q*`, tail-averages over
/// `[k0, n)` and summarizes the bias. The analytic `B` is attached when the
/// linearization exists (ties resolved to the lowest index).
pub fn empirical_bias(
    mdp: &Mdp,
    chain: &JointChain,
    solution: &OptimalSolution,
    alphas: &[f64],
    budget: &BiasBudget,
) -> Result<BiasReport> {
    if budget.replications == 0 {
        return Err(QsaError::InvalidConfig("replications must be ≥ 1".into()));
    }
    if let Some(&bad) = alphas.iter().find(|a| !(**a > 0.0)) {
        return Err(QsaError::InvalidSchedule(format!("bias stepsizes must be positive, got {bad}")));
    }
    let k0s: Vec<usize> = alphas
        .iter()
        .map(|&a| budget.k0.unwrap_or_else(|| default_burn_in(chain, a, budget.n)))
        .collect();
    if let Some(&k0) = k0s.iter().find(|&&k0| k0 >= budget.n) {
        return Err(QsaError::InvalidRange(format!("burn-in {k0} leaves no samples in a run of {}", budget.n)));
    }
    let cells: Vec<(usize, usize)> =
        (0..alphas.len()).flat_map(|i| (0..budget.replications).map(move |r| (i, r))).collect();
    let results: Vec<Result<Vec<f64>>> = cells
        .par_iter()
        .map(|&(i, r)| {
            let seed = if budget.shared_stream {
                derive_seed(budget.master_seed, &[r as u64])
            } else {
                derive_seed(budget.master_seed, &[i as u64, r as u64])
            };
            let opts = RunOptions::with_recording(Recording::At(vec![k0s[i]]));
            let trace = run(mdp, chain, &Schedule::constant(alphas[i]), &solution.q_star, seed, budget.n, &opts)?;
            tail_average(&trace, k0s[i], budget.n)
        })
        .collect();
    let mut tail = vec![Vec::with_capacity(budget.replications); alphas.len()];
    for ((i, _), res) in cells.iter().zip(results) {
        tail[*i].push(res?);
    }
    let analytic_b = linearize_allowing_ties(mdp, chain, solution)
        .and_then(|lin| analytic_bias(&lin, chain))
        .map_err(|e| log::warn!("analytic bias unavailable: {e}"))
        .ok();
    summarize_bias(&solution.q_star, alphas, &tail, analytic_b)
}

/// Running level of `E‖q_k − q*‖∞⁴` after burn-in.
#[derive(Debug, Clone, PartialEq)]
pub struct FourthMoment {
    pub alpha: f64,
    /// `(k, running mean over [k0, k])`.
    pub running: Vec<(usize, f64)>,
    pub level: f64,
}

struct FourthMomentObserver<'a> {
    q_star: &'a [f64],
    dev: Vec<f64>,
    k0: usize,
    every: usize,
    sum: f64,
    count: usize,
    running: Vec<(usize, f64)>,
}

impl StepObserver for FourthMomentObserver<'_> {
    fn observe(&mut self, k: usize, _: usize, _: usize, q_next: &[f64], changed: usize, _: f64) {
        self.dev[changed] = (q_next[changed] - self.q_star[changed]).abs();
        if k + 1 < self.k0 {
            return;
        }
        let s = self.dev.iter().copied().fold(0.0, f64::max);
        self.sum += s.powi(4);
        self.count += 1;
        if self.count.is_multiple_of(self.every) {
            self.running.push((k + 1, self.sum / self.count as f64));
        }
    }
}

/// Tracks the fourth moment of `‖q_k − q*‖∞` along one run started at `q*`.
pub fn fourth_moment(
    mdp: &Mdp,
    chain: &JointChain,
    solution: &OptimalSolution,
    alpha: f64,
    n: usize,
    k0: usize,
    seed: u64,
) -> Result<FourthMoment> {
    if k0 >= n {
        return Err(QsaError::InvalidRange(format!("burn-in {k0} ≥ run length {n}")));
    }
    let mut obs = FourthMomentObserver {
        q_star: &solution.q_star,
        dev: vec![0.0; mdp.dim()],
        k0,
        every: ((n - k0) / 100).max(1),
        sum: 0.0,
        count: 0,
        running: Vec::new(),
    };
    let opts = RunOptions::with_recording(Recording::At(Vec::new()));
    run_observed(mdp, chain, &Schedule::constant(alpha), &solution.q_star, seed, n, &opts, &mut obs)?;
    let level = obs.sum / obs.count as f64;
    Ok(FourthMoment { alpha, running: obs.running, level })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{build_joint_chain, BehaviorPolicy};
    use crate::engine::empirical_bellman_dense;
    use crate::mdp::solve_qstar;
    use crate::presets::{grid1x3, grid4x4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid1x3_setup() -> (Mdp, JointChain, OptimalSolution, Linearization) {
        let (mdp, policy) = grid1x3();
        let chain = build_joint_chain(&mdp, &policy).unwrap();
        let sol = solve_qstar(&mdp, 1e-12).unwrap();
        let lin = linearize(&mdp, &chain, &sol).unwrap();
        (mdp, chain, sol, lin)
    }

    /// `G_{q*}(x)` written out from its three-case definition.
    fn literal_g(t: Triple, a_star: &[usize], na: usize, d: usize, gamma: f64) -> DMatrix<f64> {
        let x0 = t.s * na + t.a;
        let col = t.next * na + a_star[t.next];
        DMatrix::from_fn(d, d, |row, c| {
            if row != x0 {
                if row == c { 1.0 } else { 0.0 }
            } else if c == col {
                gamma
            } else {
                0.0
            }
        })
    }

    #[test]
    fn g_matrices_match_definition_on_both_grids() {
        for (mdp, policy) in [grid1x3(), grid4x4()] {
            let chain = build_joint_chain(&mdp, &policy).unwrap();
            let sol = solve_qstar(&mdp, 1e-12).unwrap();
            let lin = linearize_allowing_ties(&mdp, &chain, &sol).unwrap();
            assert!(lin.eig_gap > EIG_GAP_MIN);
            for i in 0..lin.len() {
                let g = lin.g_matrix(i);
                assert_eq!(g, literal_g(lin.triple(i), &sol.pi_star, mdp.n_actions(), mdp.dim(), mdp.gamma()));
                // rows sum to 1 except the updated row, which sums to γ
                let j = lin.rows[i];
                for r in 0..mdp.dim() {
                    let sum: f64 = g.row(r).iter().sum();
                    assert_eq!(sum, if r == j { mdp.gamma() } else { 1.0 });
                }
            }
        }
    }

    #[test]
    fn two_state_toy_has_gamma_at_greedy_column() {
        // action 1 pays more in both states, so a* = 1 everywhere
        let mdp = Mdp::new(
            vec![vec![vec![0.5, 0.5], vec![0.5, 0.5]], vec![vec![0.5, 0.5], vec![0.5, 0.5]]],
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            0.5,
            None,
        )
        .unwrap();
        let chain = build_joint_chain(&mdp, &BehaviorPolicy::uniform(2, 2)).unwrap();
        let sol = solve_qstar(&mdp, 1e-12).unwrap();
        let lin = linearize(&mdp, &chain, &sol).unwrap();
        let i = chain.index_of(Triple { s: 0, a: 0, next: 1 }).unwrap();
        let g = lin.g_matrix(i);
        assert_eq!(g.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn tied_policy_is_rejected_by_strict_linearize() {
        let (mdp, policy) = grid4x4();
        let chain = build_joint_chain(&mdp, &policy).unwrap();
        let sol = solve_qstar(&mdp, 1e-12).unwrap();
        assert_eq!(sol.gap_delta, 0.0);
        assert!(matches!(linearize(&mdp, &chain, &sol), Err(QsaError::AssumptionViolated { .. })));
    }

    #[test]
    fn affine_part_reproduces_bellman_update_at_optimum() {
        let (mdp, chain, sol, lin) = grid1x3_setup();
        let mut drift = vec![0.0; mdp.dim()];
        for i in 0..lin.len() {
            let aq = &lin.a_matrix(i) * DVector::from_column_slice(&sol.q_star);
            let f = empirical_bellman_dense(lin.triple(i), &sol.q_star, &mdp);
            for (k, (a, b)) in aq.iter().zip(lin.b_vector(i)).enumerate() {
                assert!((a + b - f[k]).abs() <= 1e-12);
                drift[k] += chain.mu_x()[i] * f[k];
            }
        }
        assert!(drift.iter().all(|v| v.abs() <= 1e-9), "{drift:?}");
    }

    #[test]
    fn remainder_matches_definition_and_bound() {
        let (mdp, _, sol, lin) = grid1x3_setup();
        let delta = sol.gap_delta;
        let gamma = mdp.gamma();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..lin.len()).all(|i| lin.remainder(i, &sol.q_star).iter().all(|v| *v == 0.0)));
        for draw in 0..10_000 {
            let scale = if draw % 2 == 0 { 0.99 * delta } else { 20.0 * delta };
            let q: Vec<f64> = sol.q_star.iter().map(|v| v + scale * (2.0 * rng.random::<f64>() - 1.0)).collect();
            let dist = crate::stats::sup_dist(&q, &sol.q_star);
            let i = rng.random_range(0..lin.len());
            let r = lin.remainder(i, &q);
            // literal F(x,q) − F(x,q*) − A(x)(q − q*)
            let fq = empirical_bellman_dense(lin.triple(i), &q, &mdp);
            let fs = empirical_bellman_dense(lin.triple(i), &sol.q_star, &mdp);
            let e = DVector::from_iterator(q.len(), q.iter().zip(&sol.q_star).map(|(a, b)| a - b));
            let ae = lin.a_matrix(i) * e;
            for k in 0..q.len() {
                assert!((r[k] - (fq[k] - fs[k] - ae[k])).abs() <= 1e-10);
                assert!(r[k] >= 0.0);
            }
            let rn = r.iter().copied().fold(0.0, f64::max);
            if dist < delta {
                assert_eq!(rn, 0.0);
            } else {
                assert!(rn <= 2.0 * gamma / delta.powi(3) * dist.powi(4));
            }
        }
    }

    /// `B` through the dense `|X|·d` block system, with no Kronecker shortcuts.
    fn dense_block_bias(lin: &Linearization, chain: &JointChain) -> Vec<f64> {
        let nx = lin.len();
        let d = lin.dim();
        let n = nx * d;
        let p_hat = chain.reversed_p_hat();
        let mu = chain.mu_x();
        let mut fund = DMatrix::<f64>::zeros(n, n);
        let mut diff = DMatrix::<f64>::zeros(n, n);
        for x in 0..nx {
            for y in 0..nx {
                let pd = p_hat[(x, y)] - mu[y];
                for k in 0..d {
                    diff[(x * d + k, y * d + k)] = pd;
                    fund[(x * d + k, y * d + k)] = if x == y { 1.0 } else { 0.0 } - pd;
                }
            }
        }
        let mut h = DVector::<f64>::zeros(n);
        for x in 0..nx {
            let aq = lin.a_matrix(x) * DVector::from_column_slice(&lin.q_star);
            let b = lin.b_vector(x);
            for k in 0..d {
                h[x * d + k] = aq[k] + b[k];
            }
        }
        let v = fund.lu().solve(&(diff * h)).unwrap();
        let a_bar_inv = lin.a_bar.clone().try_inverse().unwrap();
        let mut out = DVector::<f64>::zeros(d);
        for x in 0..nx {
            let vx = v.rows(x * d, d).into_owned();
            out += mu[x] * (&a_bar_inv * lin.a_matrix(x) * vx);
        }
        out.iter().map(|v| -v).collect()
    }

    /// Stationary mean of the linearized dynamics `z = P̂(z + α(Dz + b))`.
    fn linear_bar_mean(lin: &Linearization, chain: &JointChain, alpha: f64) -> Vec<f64> {
        let nx = lin.len();
        let d = lin.dim();
        let n = nx * d;
        let p_hat = chain.reversed_p_hat();
        let mut m = DMatrix::<f64>::identity(n, n);
        let mut rhs = DVector::<f64>::zeros(n);
        for y in 0..nx {
            let step = DMatrix::<f64>::identity(d, d) + alpha * lin.a_matrix(y);
            let b = lin.b_vector(y);
            for x in 0..nx {
                let p = p_hat[(x, y)];
                if p == 0.0 {
                    continue;
                }
                for r in 0..d {
                    for c in 0..d {
                        m[(x * d + r, y * d + c)] -= p * step[(r, c)];
                    }
                    rhs[x * d + r] += alpha * p * b[r];
                }
            }
        }
        let z = m.lu().solve(&rhs).unwrap();
        let mu = chain.mu_x();
        (0..d).map(|k| (0..nx).map(|x| mu[x] * z[x * d + k]).sum()).collect()
    }

    #[test]
    fn structured_bias_matches_dense_block_oracle() {
        let (_, chain, _, lin) = grid1x3_setup();
        let b = analytic_bias(&lin, &chain).unwrap();
        let dense = dense_block_bias(&lin, &chain);
        let scale = dense.iter().copied().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(scale > 0.0);
        for (x, y) in b.iter().zip(&dense) {
            assert!((x - y).abs() <= 1e-9 * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn bias_is_the_first_order_term_of_the_linearized_stationary_mean() {
        let (_, chain, sol, lin) = grid1x3_setup();
        let b = analytic_bias(&lin, &chain).unwrap();
        let slope = |alpha: f64| -> Vec<f64> {
            let m = linear_bar_mean(&lin, &chain, alpha);
            m.iter().zip(&sol.q_star).map(|(m, q)| (m - q) / alpha).collect()
        };
        // Richardson on the oracle itself removes its O(α) error
        let (s1, s2) = (slope(1e-4), slope(2e-4));
        let scale = b.iter().copied().fold(0.0_f64, |m, v| m.max(v.abs()));
        for k in 0..b.len() {
            let est = 2.0 * s1[k] - s2[k];
            assert!((est - b[k]).abs() <= 1e-3 * scale, "coord {k}: {est} vs {}", b[k]);
        }
    }

    #[test]
    fn iid_chain_has_zero_bias() {
        let (mdp, chain, sol, _) = grid1x3_setup();
        let iid = chain.iid();
        let lin = linearize(&mdp, &iid, &sol).unwrap();
        let b = analytic_bias(&lin, &iid).unwrap();
        assert!(b.iter().all(|v| v.abs() <= 1e-12), "{b:?}");
    }

    #[test]
    fn zero_forcing_gives_zero_bias() {
        let (_, chain, _, mut lin) = grid1x3_setup();
        lin.h.iter_mut().for_each(|v| *v = 0.0);
        assert!(analytic_bias(&lin, &chain).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn synthetic_linear_bias_is_recovered() {
        let q_star = vec![1.0, -2.0, 0.5];
        let b0 = vec![3.0, -1.0, 0.25];
        let alphas = [0.05, 0.1, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tail: Vec<Vec<Vec<f64>>> = alphas
            .iter()
            .map(|&a| {
                (0..20)
                    .map(|_| (0..3).map(|c| q_star[c] + a * b0[c] + 1e-4 * (rng.random::<f64>() - 0.5)).collect())
                    .collect()
            })
            .collect();
        let rep = summarize_bias(&q_star, &alphas, &tail, Some(b0.clone())).unwrap();
        for c in 0..3 {
            assert!((rep.fitted_slope[c] - b0[c]).abs() <= 3.0 * rep.slope_se[c].max(1e-12) + 1e-3);
        }
        assert!((rep.fitted_order.unwrap() - 1.0).abs() < 1e-2);
        assert!(rep.cosine_to_b.unwrap() > 0.999);
        assert_eq!(rep.b_prime.as_ref().unwrap()[0][1], -3.0);
        assert_eq!(rep.rr_points.len(), 2);
        assert!(rep.empirical_points.windows(2).all(|w| w[0].alpha < w[1].alpha));
    }

    #[test]
    fn rr_cancels_exact_linear_bias() {
        let q_star = vec![2.0, 4.0];
        let b0 = [0.5, -0.25];
        let alphas = [0.125, 0.25];
        let tail: Vec<Vec<Vec<f64>>> = alphas
            .iter()
            .map(|&a| vec![(0..2).map(|c| q_star[c] + a * b0[c]).collect()])
            .collect();
        let rep = summarize_bias(&q_star, &alphas, &tail, None).unwrap();
        assert_eq!(rep.rr_points.len(), 1);
        assert!(rep.rr_points[0].bias.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn iid_chain_slope_is_statistically_zero() {
        let (mdp, chain, sol, _) = grid1x3_setup();
        let iid = chain.iid();
        // small stepsizes keep the max-nonlinearity (second-order) term negligible
        let budget = BiasBudget::new(400_000, 12, 3);
        let rep = empirical_bias(&mdp, &iid, &sol, &[0.005, 0.01], &budget).unwrap();
        for c in 0..mdp.dim() {
            assert!(
                rep.fitted_slope[c].abs() <= 3.0 * rep.slope_se[c],
                "coord {c}: {} ± {}",
                rep.fitted_slope[c],
                rep.slope_se[c]
            );
        }
    }

    #[test]
    fn fourth_moment_shrinks_with_stepsize() {
        let (mdp, chain, sol, _) = grid1x3_setup();
        let big = fourth_moment(&mdp, &chain, &sol, 0.2, 400_000, 100_000, 4).unwrap();
        let small = fourth_moment(&mdp, &chain, &sol, 0.05, 400_000, 100_000, 4).unwrap();
        assert!(small.level < big.level, "{} vs {}", small.level, big.level);
        assert!(!big.running.is_empty());
    }
}
