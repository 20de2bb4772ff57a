//! The data-generating chain `x_k = (s_k, a_k, s_{k+1})`.
//!
//! [`MarkovChain`] holds the kernel-level algebra shared by any finite
//! chain (stationary law, time reversal, mixing, sampling). [`JointChain`]
//! wraps it with the triple labels induced by an MDP and a behavior policy.

use nalgebra::DMatrix;
use petgraph::algo::kosaraju_scc;
use petgraph::graph::DiGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, VecDeque};

use crate::error::{QsaError, Result};
use crate::mdp::{validate_mdp, Mdp};

const ROW_SUM_TOL: f64 = 1e-12;
/// TV values at or below this are treated as numerically zero.
pub const TV_FLOOR: f64 = 1e-14;
pub const DEFAULT_MIXING_CAP: usize = 1_000_000;

/// `π̃(a|s)` stored flat as `s * |A| + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl BehaviorPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        if n_states == 0 {
            return Err(QsaError::InvalidPolicy("no states".into()));
        }
        let n_actions = rows[0].len();
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for (s, row) in rows.into_iter().enumerate() {
            if row.len() != n_actions {
                return Err(QsaError::InvalidPolicy(format!("row {s} has {} entries, expected {n_actions}", row.len())));
            }
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(QsaError::InvalidPolicy(format!("row {s} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(QsaError::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
            probs.extend(row);
        }
        Ok(Self { n_states, n_actions, probs })
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.probs.chunks(self.n_actions).map(|c| c.to_vec()).collect()
    }
}

/// Where a sampled trajectory begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Start {
    /// `x_0 ~ μ_X`.
    Stationary,
    Fixed(usize),
}

/// Fitted geometric mixing envelope plus a `t_δ` table.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingProfile {
    /// `(δ, t_δ)`; `None` when the TV curve did not reach δ within the cap.
    pub t_delta_table: Vec<(f64, Option<usize>)>,
    pub geo_c: f64,
    pub geo_rho: f64,
}

/// An irreducible, aperiodic finite chain with its stationary law and
/// time reversal.
#[derive(Debug, Clone)]
pub struct MarkovChain {
    p: DMatrix<f64>,
    p_hat: DMatrix<f64>,
    mu: Vec<f64>,
    /// Sparse cumulative rows for inverse-CDF sampling.
    cum_rows: Vec<Vec<(usize, f64)>>,
    cum_mu: Vec<(usize, f64)>,
    /// Representative index for each group of identical rows of P.
    row_groups: Vec<usize>,
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<(usize, f64)> {
    let mut acc = 0.0;
    let mut out = Vec::new();
    for (j, w) in weights.enumerate() {
        if w > 0.0 {
            acc += w;
            out.push((j, acc));
        }
    }
    out
}

#[inline]
fn draw(cum: &[(usize, f64)], u: f64) -> usize {
    let total = cum.last().map(|c| c.1).unwrap_or(1.0);
    let target = u * total;
    for &(j, c) in cum {
        if target < c {
            return j;
        }
    }
    cum.last().map(|c| c.0).unwrap_or(0)
}

fn check_stochastic(p: &DMatrix<f64>) -> Result<()> {
    if p.nrows() != p.ncols() || p.nrows() == 0 {
        return Err(QsaError::InvalidConfig(format!("kernel must be square and non-empty, got {}x{}", p.nrows(), p.ncols())));
    }
    for i in 0..p.nrows() {
        let row = p.row(i);
        if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(QsaError::InvalidConfig(format!("kernel row {i} has a negative or non-finite entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(QsaError::InvalidConfig(format!("kernel row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Checks strong connectivity and aperiodicity of the support graph.
fn check_ergodic(p: &DMatrix<f64>) -> Result<()> {
    let n = p.nrows();
    let mut graph = DiGraph::<(), ()>::with_capacity(n, n * 4);
    let nodes: Vec<_> = (0..n).map(|_| graph.add_node(())).collect();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if p[(i, j)] > 0.0 {
                graph.add_edge(nodes[i], nodes[j], ());
                adj[i].push(j);
            }
        }
    }
    let components = kosaraju_scc(&graph).len();
    if components != 1 {
        return Err(QsaError::ReducibleChain { components });
    }
    let period = period_of(&adj);
    if period != 1 {
        return Err(QsaError::PeriodicChain { period });
    }
    Ok(())
}

/// Period of a strongly connected graph: gcd over edges of
/// `level(u) + 1 − level(v)` for BFS levels from node 0.
fn period_of(adj: &[Vec<usize>]) -> usize {
    let n = adj.len();
    let mut level = vec![usize::MAX; n];
    level[0] = 0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if level[v] == usize::MAX {
                level[v] = level[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut g = 0usize;
    for (u, out) in adj.iter().enumerate() {
        for &v in out {
            let diff = (level[u] as i64 + 1 - level[v] as i64).unsigned_abs() as usize;
            g = gcd(g, diff);
        }
    }
    g
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Solves `μ P = μ`, `Σ μ = 1` by replacing one equation of
/// `(Pᵀ − I) μ = 0` with the normalization.
fn stationary_solve(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = p.nrows();
    let mut a = p.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = nalgebra::DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let mu = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| QsaError::NonFinite("stationary distribution solve".into()))?;
    let mut mu: Vec<f64> = mu.iter().copied().collect();
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(QsaError::NonFinite("stationary distribution solve".into()));
    }
    for v in mu.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let z: f64 = mu.iter().sum();
    mu.iter_mut().for_each(|v| *v /= z);
    Ok(mu)
}

/// Reversed kernel `p̂_ji = μ_i p_ij / μ_j`.
pub fn reverse_kernel(p: &DMatrix<f64>, mu: &[f64]) -> DMatrix<f64> {
    let n = p.nrows();
    DMatrix::from_fn(n, n, |j, i| mu[i] * p[(i, j)] / mu[j])
}

impl MarkovChain {
    /// Validates `p` (row-stochastic, irreducible, aperiodic) and computes
    /// the stationary law and reversed kernel.
    pub fn new(p: DMatrix<f64>) -> Result<Self> {
        check_stochastic(&p)?;
        check_ergodic(&p)?;
        let mu = stationary_solve(&p)?;
        let p_hat = reverse_kernel(&p, &mu);
        Ok(Self::assemble(p, p_hat, mu))
    }

    fn assemble(p: DMatrix<f64>, p_hat: DMatrix<f64>, mu: Vec<f64>) -> Self {
        let n = p.nrows();
        let cum_rows = (0..n).map(|i| cumulative(p.row(i).iter().copied())).collect();
        let cum_mu = cumulative(mu.iter().copied());
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut row_groups = Vec::new();
        for i in 0..n {
            let key: Vec<u64> = p.row(i).iter().map(|v| v.to_bits()).collect();
            if let std::collections::hash_map::Entry::Vacant(e) = seen.entry(key) {
                e.insert(i);
                row_groups.push(i);
            }
        }
        Self { p, p_hat, mu, cum_rows, cum_mu, row_groups }
    }

    /// The chain whose every row is `μ`: i.i.d. draws from the same
    /// stationary law. Its reversal is exactly `Π = 1 ⊗ μ`.
    pub fn iid_from(mu: &[f64]) -> Self {
        let n = mu.len();
        let p = DMatrix::from_fn(n, n, |_, j| mu[j]);
        Self::assemble(p.clone(), p, mu.to_vec())
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn reversed(&self) -> &DMatrix<f64> {
        &self.p_hat
    }

    pub fn stationary(&self) -> &[f64] {
        &self.mu
    }

    /// Largest absolute entry of `μ P − μ`.
    pub fn stationarity_residual(&self) -> f64 {
        let n = self.len();
        (0..n)
            .map(|j| {
                let v: f64 = (0..n).map(|i| self.mu[i] * self.p[(i, j)]).sum();
                (v - self.mu[j]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry of `μ_j p̂_ji − μ_i p_ij`.
    pub fn reversal_residual(&self) -> f64 {
        let n = self.len();
        let mut worst = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let lhs = self.mu[j] * self.p_hat[(j, i)];
                let rhs = self.mu[i] * self.p[(i, j)];
                worst = worst.max((lhs - rhs).abs());
            }
        }
        worst
    }

    /// `max_x ‖p^k(x,·) − μ‖_TV` for `k = 0..=k_max`.
    ///
    /// Rows of P that are bit-identical share their k ≥ 1 distributions,
    /// so only one representative per group is propagated.
    pub fn tv_curve(&self, k_max: usize) -> Vec<f64> {
        self.tv_curve_until(k_max, 0.0).0
    }

    /// Like [`tv_curve`](Self::tv_curve) but stops at the first k whose TV
    /// is `≤ stop_below`. Returns the curve and whether it stopped early.
    fn tv_curve_until(&self, k_max: usize, stop_below: f64) -> (Vec<f64>, bool) {
        let n = self.len();
        let tv0 = self.mu.iter().map(|m| 1.0 - m).fold(0.0, f64::max);
        let mut curve = vec![tv0];
        if tv0 <= stop_below {
            return (curve, true);
        }
        // sparse columns of P: for each i, nonzero (j, p_ij)
        let sparse: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| (0..n).filter(|&j| self.p[(i, j)] > 0.0).map(|j| (j, self.p[(i, j)])).collect())
            .collect();
        let mut dists: Vec<Vec<f64>> = self.row_groups.iter().map(|&i| self.p.row(i).iter().copied().collect()).collect();
        let mut next = vec![0.0; n];
        for k in 1..=k_max {
            if k > 1 {
                for d in dists.iter_mut() {
                    next.iter_mut().for_each(|v| *v = 0.0);
                    for (i, &di) in d.iter().enumerate() {
                        if di != 0.0 {
                            for &(j, pij) in &sparse[i] {
                                next[j] += di * pij;
                            }
                        }
                    }
                    std::mem::swap(d, &mut next);
                }
            }
            let tv = dists
                .iter()
                .map(|d| 0.5 * d.iter().zip(&self.mu).map(|(a, b)| (a - b).abs()).sum::<f64>())
                .fold(0.0, f64::max);
            curve.push(tv);
            if tv <= stop_below {
                return (curve, true);
            }
        }
        (curve, false)
    }

    /// Advances a seeded sampler; `x_0` is drawn according to `start`.
    pub fn trajectory(&self, seed: u64, start: Start) -> Trajectory<'_> {
        Trajectory {
            chain: self,
            rng: ChaCha8Rng::seed_from_u64(seed),
            start: Some(start),
            current: 0,
        }
    }
}

/// Infinite seeded stream of chain states.
#[derive(Debug)]
pub struct Trajectory<'a> {
    chain: &'a MarkovChain,
    rng: ChaCha8Rng,
    start: Option<Start>,
    current: usize,
}

impl Iterator for Trajectory<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        match self.start.take() {
            Some(Start::Stationary) => {
                let u: f64 = self.rng.random();
                self.current = draw(&self.chain.cum_mu, u);
            }
            Some(Start::Fixed(x)) => self.current = x,
            None => {
                let u: f64 = self.rng.random();
                self.current = draw(&self.chain.cum_rows[self.current], u);
            }
        }
        Some(self.current)
    }
}

/// A joint state `(s, a, s')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub s: usize,
    pub a: usize,
    pub next: usize,
}

/// The chain on `X = S × A × S'` induced by an MDP and a behavior policy.
#[derive(Debug, Clone)]
pub struct JointChain {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    states_x: Vec<Triple>,
    index: HashMap<Triple, usize>,
    chain: MarkovChain,
    mu_sa: Vec<f64>,
    beta: f64,
    mixing: MixingProfile,
}

/// δ values tabulated in every chain's [`MixingProfile`].
pub const DEFAULT_DELTA_GRID: [f64; 8] = [0.5, 0.25, 0.1, 0.05, 0.01, 1e-3, 1e-4, 1e-6];
const PROFILE_K_MAX: usize = 10_000;

/// Builds the joint chain, checks irreducibility and aperiodicity, and
/// computes `μ_X`, `μ_S`, `P̂`, `β` and a mixing profile.
pub fn build_joint_chain(mdp: &Mdp, policy: &BehaviorPolicy) -> Result<JointChain> {
    let report = validate_mdp(mdp);
    if !report.is_ok() {
        let msgs: Vec<String> = report.violations.iter().map(|v| v.message.clone()).collect();
        return Err(QsaError::InvalidMdp(msgs.join("; ")));
    }
    if policy.n_states != mdp.n_states() || policy.n_actions != mdp.n_actions() {
        return Err(QsaError::InvalidPolicy(format!(
            "policy is {}x{}, MDP is {}x{}",
            policy.n_states,
            policy.n_actions,
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut states_x = Vec::new();
    for s in 0..ns {
        for a in 0..na {
            let pa = policy.prob(s, a);
            for (next, &t) in mdp.kernel_row(s, a).iter().enumerate() {
                if pa * t > 0.0 {
                    states_x.push(Triple { s, a, next });
                }
            }
        }
    }
    let index: HashMap<Triple, usize> = states_x.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let nx = states_x.len();
    let mut p = DMatrix::zeros(nx, nx);
    for (i, x) in states_x.iter().enumerate() {
        let s1 = x.next;
        for a1 in 0..na {
            let pa = policy.prob(s1, a1);
            if pa == 0.0 {
                continue;
            }
            for (s2, &t) in mdp.kernel_row(s1, a1).iter().enumerate() {
                if t > 0.0 {
                    let j = index[&Triple { s: s1, a: a1, next: s2 }];
                    p[(i, j)] = pa * t;
                }
            }
        }
    }
    let chain = MarkovChain::new(p)?;
    Ok(JointChain::assemble(ns, na, mdp.gamma(), states_x, index, chain))
}

impl JointChain {
    fn assemble(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        states_x: Vec<Triple>,
        index: HashMap<Triple, usize>,
        chain: MarkovChain,
    ) -> Self {
        let mut mu_sa = vec![0.0; n_states * n_actions];
        for (x, m) in states_x.iter().zip(chain.stationary()) {
            mu_sa[x.s * n_actions + x.a] += m;
        }
        let min_mu = mu_sa.iter().copied().fold(f64::INFINITY, f64::min);
        let beta = 1.0 - (1.0 - gamma) * min_mu;
        let mixing = compute_profile(&chain, &DEFAULT_DELTA_GRID, PROFILE_K_MAX);
        Self { n_states, n_actions, gamma, states_x, index, chain, mu_sa, beta, mixing }
    }

    /// Same triples and stationary law, but successive triples drawn
    /// i.i.d. from `μ_X`. Not MDP-consistent; used to isolate the
    /// Markovian contribution to the bias.
    pub fn iid(&self) -> JointChain {
        let chain = MarkovChain::iid_from(self.chain.stationary());
        Self::assemble(
            self.n_states,
            self.n_actions,
            self.gamma,
            self.states_x.clone(),
            self.index.clone(),
            chain,
        )
    }

    pub fn markov(&self) -> &MarkovChain {
        &self.chain
    }

    pub fn states_x(&self) -> &[Triple] {
        &self.states_x
    }

    pub fn index_of(&self, t: Triple) -> Option<usize> {
        self.index.get(&t).copied()
    }

    pub fn len(&self) -> usize {
        self.states_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states_x.is_empty()
    }

    pub fn mu_x(&self) -> &[f64] {
        self.chain.stationary()
    }

    /// Marginal stationary law of `(s, a)`.
    pub fn mu_sa(&self) -> &[f64] {
        &self.mu_sa
    }

    pub fn kernel_p(&self) -> &DMatrix<f64> {
        self.chain.kernel()
    }

    pub fn reversed_p_hat(&self) -> &DMatrix<f64> {
        self.chain.reversed()
    }

    /// `1 − (1−γ) min_{(s,a)} μ_S(s,a)`.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mixing(&self) -> &MixingProfile {
        &self.mixing
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

impl AsRef<MarkovChain> for JointChain {
    fn as_ref(&self) -> &MarkovChain {
        &self.chain
    }
}

impl AsRef<MarkovChain> for MarkovChain {
    fn as_ref(&self) -> &MarkovChain {
        self
    }
}

fn compute_profile(chain: &MarkovChain, deltas: &[f64], k_max: usize) -> MixingProfile {
    let (curve, _) = chain.tv_curve_until(k_max, TV_FLOOR);
    let t_delta_table = deltas
        .iter()
        .map(|&d| (d, curve.iter().position(|&tv| tv <= d)))
        .collect();
    let (geo_c, geo_rho) = envelope_fit(&curve);
    MixingProfile { t_delta_table, geo_c, geo_rho }
}

/// `t_δ = min{k ≥ 0 : max_x ‖p^k(x,·) − μ‖_TV ≤ δ}` with a hard cap on k.
pub fn mixing_time(chain: impl AsRef<MarkovChain>, delta: f64, cap: usize) -> Result<usize> {
    if !(delta > 0.0) {
        return Err(QsaError::InvalidConfig(format!("mixing precision must be positive, got {delta}")));
    }
    if delta >= 1.0 {
        return Ok(0);
    }
    let (curve, reached) = chain.as_ref().tv_curve_until(cap, delta);
    if reached {
        Ok(curve.len() - 1)
    } else {
        let last_tv = *curve.last().unwrap();
        let keep = curve.len().min(1000);
        Err(QsaError::CapExceeded { cap, last_tv, tv_curve: curve[..keep].to_vec() })
    }
}

/// Least-squares fit of `log TV_k` on k, then the smallest c making
/// `c ρ^k ≥ TV_k` at every computed k. A chain that mixes in one step
/// returns `ρ = 0`.
pub fn fit_geometric_mixing(chain: impl AsRef<MarkovChain>, k_max: usize) -> (f64, f64) {
    let curve = chain.as_ref().tv_curve(k_max.max(2));
    envelope_fit(&curve)
}

fn envelope_fit(curve: &[f64]) -> (f64, f64) {
    let pts: Vec<(f64, f64)> = curve
        .iter()
        .enumerate()
        .filter(|(_, tv)| **tv > TV_FLOOR)
        .map(|(k, tv)| (k as f64, tv.ln()))
        .collect();
    if pts.len() < 2 {
        return (curve.first().copied().unwrap_or(0.0), 0.0);
    }
    let (slope, _) = crate::stats::linear_fit(&pts);
    let rho = slope.exp().min(1.0);
    let c = curve
        .iter()
        .enumerate()
        .map(|(k, tv)| tv / rho.powi(k as i32))
        .fold(0.0, f64::max);
    (c, rho)
}

/// Collects `n` states of the seeded trajectory.
pub fn sample_trajectory(chain: impl AsRef<MarkovChain>, seed: u64, n: usize, start: Start) -> Vec<usize> {
    chain.as_ref().trajectory(seed, start).take(n).collect()
}

/// Advisory check of `α t_α ≤ c₀ (1−β)² / log(|S||A|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepsizeAdvisory {
    pub alpha: f64,
    pub t_alpha: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub admissible: bool,
}

pub fn stepsize_advisory(chain: &JointChain, alpha: f64, c0: f64) -> Result<StepsizeAdvisory> {
    let t_alpha = mixing_time(chain, alpha, DEFAULT_MIXING_CAP)?;
    let lhs = alpha * t_alpha as f64;
    let log_d = ((chain.n_states * chain.n_actions) as f64).ln();
    let rhs = if log_d > 0.0 {
        c0 * (1.0 - chain.beta).powi(2) / log_d
    } else {
        f64::INFINITY
    };
    let admissible = lhs <= rhs;
    if !admissible {
        log::warn!("stepsize {alpha} fails the advisory mixing condition: {lhs} > {rhs}");
    }
    Ok(StepsizeAdvisory { alpha, t_alpha, lhs, rhs, admissible })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> MarkovChain {
        MarkovChain::new(DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8])).unwrap()
    }

    /// Brute-force TV by explicit dense matrix powers.
    fn brute_tv(p: &DMatrix<f64>, mu: &[f64], k: usize) -> f64 {
        let n = p.nrows();
        let mut pk = DMatrix::identity(n, n);
        for _ in 0..k {
            pk = &pk * p;
        }
        (0..n)
            .map(|i| 0.5 * (0..n).map(|j| (pk[(i, j)] - mu[j]).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    #[test]
    fn two_state_stationary_and_mixing_time() {
        let c = two_state();
        assert!((c.stationary()[0] - 2.0 / 3.0).abs() < 1e-14);
        let t = mixing_time(&c, 0.01, 1000).unwrap();
        let brute = (0..).find(|&k| brute_tv(c.kernel(), c.stationary(), k) <= 0.01).unwrap();
        assert_eq!(t, brute);
    }

    #[test]
    fn two_state_geometric_rate_is_second_eigenvalue() {
        let (c, rho) = fit_geometric_mixing(two_state(), 60);
        assert!((rho - 0.7).abs() < 1e-6, "rho = {rho}");
        let curve = two_state().tv_curve(60);
        for (k, tv) in curve.iter().enumerate() {
            assert!(c * rho.powi(k as i32) >= *tv);
        }
    }

    #[test]
    fn rank_one_chain_mixes_in_one_step() {
        let mu = [0.5, 0.3, 0.2];
        let c = MarkovChain::iid_from(&mu);
        let threshold = 1.0 - 0.2;
        assert_eq!(mixing_time(&c, 0.79, 100).unwrap(), 1);
        assert_eq!(mixing_time(&c, 0.1, 100).unwrap(), 1);
        assert_eq!(mixing_time(&c, threshold, 100).unwrap(), 0);
        assert_eq!(mixing_time(&c, 1.5, 100).unwrap(), 0);
        let (cc, rho) = fit_geometric_mixing(&c, 10);
        assert_eq!(rho, 0.0);
        assert!((cc - threshold).abs() < 1e-15);
    }

    #[test]
    fn cap_exceeded_reports_partial_curve() {
        let slow = MarkovChain::new(DMatrix::from_row_slice(2, 2, &[0.999, 0.001, 0.001, 0.999])).unwrap();
        match mixing_time(&slow, 1e-6, 50) {
            Err(QsaError::CapExceeded { cap, tv_curve, .. }) => {
                assert_eq!(cap, 50);
                assert_eq!(tv_curve.len(), 51);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn periodic_and_reducible_chains_rejected() {
        let cycle = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(MarkovChain::new(cycle), Err(QsaError::PeriodicChain { period: 3 })));
        let split = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(MarkovChain::new(split), Err(QsaError::ReducibleChain { components: 2 })));
    }

    #[test]
    fn deterministic_cycle_mdp_is_periodic() {
        // two states, one action, deterministic swap
        let mdp = Mdp::new(
            vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]],
            vec![vec![0.0], vec![1.0]],
            0.9,
            None,
        )
        .unwrap();
        let err = build_joint_chain(&mdp, &BehaviorPolicy::uniform(2, 1)).unwrap_err();
        assert_eq!(err, QsaError::PeriodicChain { period: 2 });
    }

    #[test]
    fn doubly_stochastic_gives_uniform_and_transpose() {
        let p = DMatrix::from_row_slice(
            4,
            4,
            &[0.5, 0.25, 0.125, 0.125, 0.25, 0.5, 0.125, 0.125, 0.125, 0.125, 0.5, 0.25, 0.125, 0.125, 0.25, 0.5],
        );
        let c = MarkovChain::new(p.clone()).unwrap();
        assert!(c.stationary().iter().all(|m| *m == 0.25), "{:?}", c.stationary());
        assert_eq!(c.reversed(), &p.transpose());
    }

    #[test]
    fn birth_death_chain_is_reversible() {
        let p = DMatrix::from_row_slice(
            4,
            4,
            &[0.6, 0.4, 0.0, 0.0, 0.3, 0.3, 0.4, 0.0, 0.0, 0.2, 0.5, 0.3, 0.0, 0.0, 0.7, 0.3],
        );
        let c = MarkovChain::new(p.clone()).unwrap();
        let diff = (c.reversed() - &p).abs().max();
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn reversal_is_an_involution() {
        let p = DMatrix::from_row_slice(3, 3, &[0.1, 0.6, 0.3, 0.5, 0.2, 0.3, 0.3, 0.3, 0.4]);
        let c = MarkovChain::new(p.clone()).unwrap();
        let back = reverse_kernel(c.reversed(), c.stationary());
        assert!((back - p).abs().max() <= 1e-12);
        assert!(c.reversal_residual() <= 1e-12);
    }

    #[test]
    fn trajectory_is_seed_deterministic() {
        let c = two_state();
        let a = sample_trajectory(&c, 42, 500, Start::Stationary);
        let b = sample_trajectory(&c, 42, 500, Start::Stationary);
        assert_eq!(a, b);
        assert_ne!(a, sample_trajectory(&c, 43, 500, Start::Stationary));
    }

    #[test]
    fn deterministic_rows_give_unique_path() {
        let p = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.5]);
        let c = MarkovChain::new(p).unwrap();
        for seed in 0..5 {
            let path = sample_trajectory(&c, seed, 3, Start::Fixed(0));
            assert_eq!(path, vec![0, 1, 2]);
        }
    }

    #[test]
    fn visit_frequencies_match_stationary_law() {
        let p = DMatrix::from_row_slice(3, 3, &[0.1, 0.6, 0.3, 0.5, 0.2, 0.3, 0.3, 0.3, 0.4]);
        let c = MarkovChain::new(p).unwrap();
        let n = 1_000_000;
        let mut counts = [0usize; 3];
        for x in c.trajectory(9, Start::Stationary).take(n) {
            counts[x] += 1;
        }
        for (i, &cnt) in counts.iter().enumerate() {
            let freq = cnt as f64 / n as f64;
            let mu = c.stationary()[i];
            // generous band: correlated samples inflate the iid standard error
            let se = (mu * (1.0 - mu) / n as f64).sqrt() * 3.0;
            assert!((freq - mu).abs() < 3.0 * se, "state {i}: {freq} vs {mu}");
        }
    }

    #[test]
    fn t_delta_is_monotone_in_delta() {
        let p = DMatrix::from_row_slice(3, 3, &[0.1, 0.6, 0.3, 0.5, 0.2, 0.3, 0.3, 0.3, 0.4]);
        let c = MarkovChain::new(p).unwrap();
        let grid = [0.9, 0.5, 0.2, 0.1, 0.01, 1e-4, 1e-8];
        let ts: Vec<usize> = grid.iter().map(|&d| mixing_time(&c, d, 1000).unwrap()).collect();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]), "{ts:?}");
    }
}
