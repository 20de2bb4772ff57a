//! Two Q-learning runs driven by one shared data stream, plus the min/max
//! envelope recursions that sandwich their difference.

use crate::chain::{JointChain, Start};
use crate::engine::Schedule;
use crate::error::{QsaError, Result};
use crate::mdp::{max_over_actions, sup_norm, Mdp};

/// Lower and upper envelopes `w̲ ≤ w ≤ w̄`, started at `w̲₀ = w₀ = w̄₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Envelope {
    pub fn new(w0: &[f64]) -> Self {
        Self { lower: w0.to_vec(), upper: w0.to_vec() }
    }

    /// Updates entry `j` from next state `next`:
    /// `w̲(j) ← (1−α) w̲(j) + αγ min_a w̲(next,a)` and the same with max for `w̄`.
    pub fn step(&mut self, j: usize, next: usize, alpha: f64, gamma: f64, n_actions: usize) {
        let row = next * n_actions..(next + 1) * n_actions;
        let lo = self.lower[row.clone()].iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.upper[row].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.lower[j] = (1.0 - alpha) * self.lower[j] + alpha * gamma * lo;
        self.upper[j] = (1.0 - alpha) * self.upper[j] + alpha * gamma * hi;
    }
}

/// Sup-norm summaries of a coupled run, one entry per iterate `k = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTrace {
    pub alpha: f64,
    pub seed: u64,
    pub n: usize,
    /// `‖q_k^{[1]} − q_k^{[2]}‖∞`.
    pub w_sup: Vec<f64>,
    pub lower_sup: Vec<f64>,
    pub upper_sup: Vec<f64>,
    /// Number of `(k, s, a)` with `w̲ > w` or `w > w̄` beyond rounding slack.
    pub sandwich_violations: usize,
    /// Largest amount by which the sandwich was breached (0 if never).
    pub max_breach: f64,
}

/// Rounding slack for the sandwich check, relative to the iterate scale.
pub const SANDWICH_REL_TOL: f64 = 1e-12;

/// Runs `q^{[1]}` from `q0_a` and `q^{[2]}` from `q0_b` with constant `α`
/// on one stationary-start trajectory, tracking `w = q^{[1]} − q^{[2]}`.
#[allow(clippy::too_many_arguments)]
pub fn coupled_run(
    mdp: &Mdp,
    chain: &JointChain,
    alpha: f64,
    q0_a: &[f64],
    q0_b: &[f64],
    seed: u64,
    n: usize,
) -> Result<CoupledTrace> {
    let d = mdp.dim();
    for q0 in [q0_a, q0_b] {
        if q0.len() != d {
            return Err(QsaError::DimensionMismatch { expected: d, got: q0.len() });
        }
    }
    Schedule::constant(alpha).validate()?;
    let guard = 10.0 * mdp.q_max(q0_a).max(mdp.q_max(q0_b));
    let tol = SANDWICH_REL_TOL * guard;
    let na = mdp.n_actions();
    let gamma = mdp.gamma();
    let rewards = mdp.rewards();
    let triples = chain.states_x();

    let mut qa = q0_a.to_vec();
    let mut qb = q0_b.to_vec();
    let mut w: Vec<f64> = qa.iter().zip(&qb).map(|(a, b)| a - b).collect();
    let mut env = Envelope::new(&w);
    let mut w_sup = Vec::with_capacity(n + 1);
    let mut lower_sup = Vec::with_capacity(n + 1);
    let mut upper_sup = Vec::with_capacity(n + 1);
    w_sup.push(sup_norm(&w));
    lower_sup.push(sup_norm(&env.lower));
    upper_sup.push(sup_norm(&env.upper));
    let mut violations = 0;
    let mut max_breach = 0.0_f64;

    for (k, x) in chain.markov().trajectory(seed, Start::Stationary).take(n).enumerate() {
        let t = triples[x];
        let j = t.s * na + t.a;
        for q in [&mut qa, &mut qb] {
            let target = rewards[j] + gamma * max_over_actions(q, t.next, na);
            let new = q[j] + alpha * (target - q[j]);
            if !new.is_finite() || new.abs() > guard {
                return Err(QsaError::NonFiniteIterate { step: k + 1 });
            }
            q[j] = new;
        }
        env.step(j, t.next, alpha, gamma, na);
        w[j] = qa[j] - qb[j];
        // only entry j moved, so only it can newly breach the sandwich
        let breach = (env.lower[j] - w[j]).max(w[j] - env.upper[j]);
        if breach > tol {
            violations += 1;
        }
        max_breach = max_breach.max(breach);
        w_sup.push(sup_norm(&w));
        lower_sup.push(sup_norm(&env.lower));
        upper_sup.push(sup_norm(&env.upper));
    }
    Ok(CoupledTrace {
        alpha,
        seed,
        n,
        w_sup,
        lower_sup,
        upper_sup,
        sandwich_violations: violations,
        max_breach,
    })
}
