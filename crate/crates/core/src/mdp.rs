//! Finite discounted MDPs and the value-iteration oracle for `q*`.
//!
//! Q-vectors are flat `Vec<f64>` of length `|S||A|`, indexed by
//! `s * |A| + a` (see [`Mdp::sa`]).

use crate::error::{QsaError, Result};

const ROW_SUM_TOL: f64 = 1e-12;

/// A finite MDP with dense kernel and reward tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    /// `kernel[(s * |A| + a) * |S| + s']` = T(s'|s,a).
    kernel: Vec<f64>,
    rewards: Vec<f64>,
    gamma: f64,
    r_max: f64,
}

/// One failed invariant, naming the offending row when there is one.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub row: Option<(usize, usize)>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Outcome of [`validate_mdp`]: empty means ok.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl Mdp {
    /// Builds an MDP and rejects it unless every invariant holds.
    ///
    /// `kernel[s][a]` is the next-state distribution and `rewards[s][a]`
    /// the reward. `r_max` defaults to `max |r|` when `None`.
    pub fn new(
        kernel: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        r_max: Option<f64>,
    ) -> Result<Self> {
        let mdp = Self::from_nested(kernel, rewards, gamma, r_max)?;
        let report = validate_mdp(&mdp);
        if report.is_ok() {
            Ok(mdp)
        } else {
            let msgs: Vec<String> = report.violations.iter().map(|v| v.message.clone()).collect();
            Err(QsaError::InvalidMdp(msgs.join("; ")))
        }
    }

    /// Builds an MDP without checking probabilities, rewards or discount.
    /// Only the table shapes are checked.
    pub fn from_nested(
        kernel: Vec<Vec<Vec<f64>>>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        r_max: Option<f64>,
    ) -> Result<Self> {
        let n_states = kernel.len();
        if n_states == 0 {
            return Err(QsaError::InvalidMdp("no states".into()));
        }
        let n_actions = kernel[0].len();
        if n_actions == 0 {
            return Err(QsaError::InvalidMdp("no actions".into()));
        }
        if rewards.len() != n_states {
            return Err(QsaError::DimensionMismatch { expected: n_states, got: rewards.len() });
        }
        let mut flat_kernel = Vec::with_capacity(n_states * n_actions * n_states);
        let mut flat_rewards = Vec::with_capacity(n_states * n_actions);
        for (s, (rows, rs)) in kernel.into_iter().zip(rewards).enumerate() {
            if rows.len() != n_actions || rs.len() != n_actions {
                return Err(QsaError::InvalidMdp(format!(
                    "state {s} has {} kernel rows and {} rewards, expected {n_actions}",
                    rows.len(),
                    rs.len()
                )));
            }
            for row in rows {
                if row.len() != n_states {
                    return Err(QsaError::DimensionMismatch { expected: n_states, got: row.len() });
                }
                flat_kernel.extend(row);
            }
            flat_rewards.extend(rs);
        }
        let r_max = r_max.unwrap_or_else(|| flat_rewards.iter().fold(0.0_f64, |m, r| m.max(r.abs())));
        Ok(Self {
            n_states,
            n_actions,
            kernel: flat_kernel,
            rewards: flat_rewards,
            gamma,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// `|S||A|`, the dimension of a q-vector.
    pub fn dim(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    #[inline]
    pub fn sa(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[self.sa(s, a)]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    /// T(·|s,a).
    #[inline]
    pub fn kernel_row(&self, s: usize, a: usize) -> &[f64] {
        let start = self.sa(s, a) * self.n_states;
        &self.kernel[start..start + self.n_states]
    }

    /// Iterate bound `max(‖q0‖∞, r_max / (1 − γ))`.
    pub fn q_max(&self, q0: &[f64]) -> f64 {
        let q0_norm = sup_norm(q0);
        q0_norm.max(self.r_max / (1.0 - self.gamma))
    }

    /// Nested `[s][a][s']` copy of the kernel, the config layout.
    pub fn kernel_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.n_states)
            .map(|s| (0..self.n_actions).map(|a| self.kernel_row(s, a).to_vec()).collect())
            .collect()
    }

    pub fn rewards_nested(&self) -> Vec<Vec<f64>> {
        self.rewards.chunks(self.n_actions).map(|c| c.to_vec()).collect()
    }
}

/// Checks every MDP invariant; violations are data, not errors.
///
/// Rewards are checked as `|r(s,a)| ≤ r_max` so that penalty rewards
/// (the gridworld presets use −4 and −1) are admissible.
pub fn validate_mdp(mdp: &Mdp) -> ValidationReport {
    let mut violations = Vec::new();
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let row = mdp.kernel_row(s, a);
            if let Some(p) = row.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
                violations.push(Violation {
                    row: Some((s, a)),
                    message: format!("row (s={s},a={a}) has invalid entry {p}"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                violations.push(Violation {
                    row: Some((s, a)),
                    message: format!("row (s={s},a={a}) sums to {sum}"),
                });
            }
            let r = mdp.reward(s, a);
            if !r.is_finite() || r.abs() > mdp.r_max {
                violations.push(Violation {
                    row: Some((s, a)),
                    message: format!("reward (s={s},a={a}) = {r} outside [-r_max, r_max] with r_max = {}", mdp.r_max),
                });
            }
        }
    }
    if !(mdp.gamma > 0.0 && mdp.gamma < 1.0) {
        violations.push(Violation {
            row: None,
            message: format!("discount not in (0,1): {}", mdp.gamma),
        });
    }
    if !(mdp.r_max >= 0.0) || !mdp.r_max.is_finite() {
        violations.push(Violation {
            row: None,
            message: format!("r_max must be finite and non-negative: {}", mdp.r_max),
        });
    }
    ValidationReport { violations }
}

/// Index and value of the largest entry; ties go to the lowest index.
#[inline]
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_v = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    (best, best_v)
}

#[inline]
pub(crate) fn max_over_actions(q: &[f64], s: usize, n_actions: usize) -> f64 {
    let row = &q[s * n_actions..(s + 1) * n_actions];
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Bellman optimality operator:
/// `(Tq)(s,a) = r(s,a) + γ Σ_{s'} T(s'|s,a) max_{a'} q(s',a')`.
pub fn bellman_optimality(q: &[f64], mdp: &Mdp) -> Result<Vec<f64>> {
    if q.len() != mdp.dim() {
        return Err(QsaError::DimensionMismatch { expected: mdp.dim(), got: q.len() });
    }
    let v: Vec<f64> = (0..mdp.n_states)
        .map(|s| max_over_actions(q, s, mdp.n_actions))
        .collect();
    let mut out = vec![0.0; mdp.dim()];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let expect: f64 = mdp.kernel_row(s, a).iter().zip(&v).map(|(p, vv)| p * vv).sum();
            out[mdp.sa(s, a)] = mdp.reward(s, a) + mdp.gamma * expect;
        }
    }
    Ok(out)
}

/// Ground-truth optimal Q-function together with its greedy policy and gap.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution {
    pub q_star: Vec<f64>,
    pub pi_star: Vec<usize>,
    /// Half of the smallest optimality margin; `+∞` when every state has a
    /// single action, `0` when the optimal action is not unique somewhere.
    pub gap_delta: f64,
    /// `‖T q* − q*‖∞` at termination.
    pub residual: f64,
    /// Iterate bound for runs started from `q0 = 0`.
    pub q_max: f64,
    pub iterations: usize,
}

impl OptimalSolution {
    /// Whether the optimal action is unique in every state.
    pub fn has_unique_policy(&self) -> bool {
        self.gap_delta > 0.0
    }
}

pub const DEFAULT_VI_TOL: f64 = 1e-10;
const VI_MAX_ITERS: usize = 10_000_000;

/// Value iteration from `q = 0` until `‖q' − q‖∞ ≤ tol (1−γ)/γ`, which
/// certifies `‖q − q*‖∞ ≤ tol`.
pub fn solve_qstar(mdp: &Mdp, tol: f64) -> Result<OptimalSolution> {
    if !(tol > 0.0) {
        return Err(QsaError::InvalidConfig(format!("value-iteration tolerance must be positive, got {tol}")));
    }
    let gamma = mdp.gamma;
    let stop = tol * (1.0 - gamma) / gamma;
    let mut q = vec![0.0; mdp.dim()];
    let mut iterations = 0;
    loop {
        let next = bellman_optimality(&q, mdp)?;
        iterations += 1;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(QsaError::NonFinite("value iteration".into()));
        }
        let change = next.iter().zip(&q).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        q = next;
        if change <= stop {
            break;
        }
        if iterations >= VI_MAX_ITERS {
            return Err(QsaError::NoConvergence { iterations, last_change: change });
        }
    }
    let tq = bellman_optimality(&q, mdp)?;
    let residual = tq.iter().zip(&q).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));

    let n_actions = mdp.n_actions;
    let mut pi_star = Vec::with_capacity(mdp.n_states);
    let mut gap = f64::INFINITY;
    for s in 0..mdp.n_states {
        let row = &q[s * n_actions..(s + 1) * n_actions];
        let (best, best_v) = argmax(row);
        pi_star.push(best);
        for (a, &v) in row.iter().enumerate() {
            if a != best {
                gap = gap.min(0.5 * (best_v - v));
            }
        }
    }
    if gap == 0.0 {
        log::warn!("optimal policy is not unique: some state has tied optimal actions (gap = 0)");
    }
    Ok(OptimalSolution {
        q_star: q,
        pi_star,
        gap_delta: gap,
        residual,
        q_max: mdp.q_max(&[]),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(r: f64, gamma: f64) -> Mdp {
        Mdp::new(vec![vec![vec![1.0]]], vec![vec![r]], gamma, None).unwrap()
    }

    fn two_state_chain() -> Mdp {
        // s0 -> s1 -> s1, one action
        Mdp::new(
            vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            vec![vec![0.0], vec![1.0]],
            0.5,
            None,
        )
        .unwrap()
    }

    #[test]
    fn bellman_single_state_from_zero() {
        let mdp = single(1.0, 0.5);
        assert_eq!(bellman_optimality(&[0.0], &mdp).unwrap(), vec![1.0]);
    }

    #[test]
    fn bellman_two_state_chain_and_fixed_point() {
        let mdp = two_state_chain();
        assert_eq!(bellman_optimality(&[0.0, 0.0], &mdp).unwrap(), vec![0.0, 1.0]);
        // brute force value iteration
        let mut q = vec![0.0, 0.0];
        for _ in 0..200 {
            q = bellman_optimality(&q, &mdp).unwrap();
        }
        assert!((q[0] - 1.0).abs() < 1e-12 && (q[1] - 2.0).abs() < 1e-12);
        let sol = solve_qstar(&mdp, 1e-12).unwrap();
        assert!((sol.q_star[0] - 1.0).abs() < 1e-12);
        assert!((sol.q_star[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bellman_dimension_mismatch() {
        let mdp = two_state_chain();
        assert!(matches!(
            bellman_optimality(&[0.0], &mdp),
            Err(QsaError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn single_state_solution_is_geometric_series() {
        let sol = solve_qstar(&single(1.0, 0.5), DEFAULT_VI_TOL).unwrap();
        assert!((sol.q_star[0] - 2.0).abs() <= DEFAULT_VI_TOL);
        assert_eq!(sol.gap_delta, f64::INFINITY);
        assert!(sol.residual <= DEFAULT_VI_TOL);
    }

    #[test]
    fn zero_discount_limit_gives_rewards() {
        // γ must lie in (0,1); a tiny γ makes the lookahead negligible
        let mdp = Mdp::from_nested(
            vec![vec![vec![0.5, 0.5], vec![1.0, 0.0]], vec![vec![0.0, 1.0], vec![0.3, 0.7]]],
            vec![vec![1.0, 3.0], vec![2.0, -1.0]],
            0.0,
            None,
        )
        .unwrap();
        let q = bellman_optimality(&[5.0, -2.0, 7.0, 1.0], &mdp).unwrap();
        assert_eq!(q, vec![1.0, 3.0, 2.0, -1.0]);
    }

    #[test]
    fn validation_reports_bad_row_and_discount() {
        let mdp = Mdp::from_nested(
            vec![vec![vec![0.5, 0.4]], vec![vec![0.0, 1.0]]],
            vec![vec![0.0], vec![1.0]],
            1.0,
            None,
        )
        .unwrap();
        let report = validate_mdp(&mdp);
        let msgs: Vec<_> = report.violations.iter().map(|v| v.message.clone()).collect();
        assert!(msgs.iter().any(|m| m == "row (s=0,a=0) sums to 0.9"), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.starts_with("discount not in (0,1)")), "{msgs:?}");
        assert_eq!(report.violations[0].row, Some((0, 0)));
    }

    #[test]
    fn validation_rejects_reward_above_bound() {
        let mdp = Mdp::from_nested(vec![vec![vec![1.0]]], vec![vec![3.0]], 0.5, Some(1.0)).unwrap();
        assert!(!validate_mdp(&mdp).is_ok());
    }

    #[test]
    fn tied_actions_give_zero_gap_and_lowest_index() {
        let mdp = Mdp::new(
            vec![vec![vec![1.0], vec![1.0]]],
            vec![vec![1.0, 1.0]],
            0.9,
            None,
        )
        .unwrap();
        let sol = solve_qstar(&mdp, 1e-10).unwrap();
        assert_eq!(sol.gap_delta, 0.0);
        assert_eq!(sol.pi_star, vec![0]);
        assert!(!sol.has_unique_policy());
    }

    fn random_mdp() -> impl Strategy<Value = Mdp> {
        (1usize..5, 1usize..4, 0.05f64..0.95).prop_flat_map(|(ns, na, gamma)| {
            (
                proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, ns), ns * na),
                proptest::collection::vec(-2.0f64..2.0, ns * na),
            )
                .prop_map(move |(rows, rs)| {
                    let kernel = (0..ns)
                        .map(|s| {
                            (0..na)
                                .map(|a| {
                                    let row = &rows[s * na + a];
                                    let z: f64 = row.iter().sum();
                                    let mut r: Vec<f64> = row.iter().map(|x| x / z).collect();
                                    let fix = 1.0 - r.iter().sum::<f64>();
                                    r[0] += fix;
                                    r
                                })
                                .collect()
                        })
                        .collect();
                    let rewards = rs.chunks(na).map(|c| c.to_vec()).collect();
                    Mdp::from_nested(kernel, rewards, gamma, None).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn bellman_is_gamma_contraction(mdp in random_mdp(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q1: Vec<f64> = (0..mdp.dim()).map(|_| rng.random_range(-10.0..10.0)).collect();
            let q2: Vec<f64> = (0..mdp.dim()).map(|_| rng.random_range(-10.0..10.0)).collect();
            let t1 = bellman_optimality(&q1, &mdp).unwrap();
            let t2 = bellman_optimality(&q2, &mdp).unwrap();
            let lhs = t1.iter().zip(&t2).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            let rhs = q1.iter().zip(&q2).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
            prop_assert!(lhs <= mdp.gamma() * rhs + 1e-12);
        }

        #[test]
        fn bellman_is_monotone(mdp in random_mdp(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let q1: Vec<f64> = (0..mdp.dim()).map(|_| rng.random_range(-10.0..10.0)).collect();
            let q2: Vec<f64> = q1.iter().map(|v| v + rng.random_range(0.0..3.0)).collect();
            let t1 = bellman_optimality(&q1, &mdp).unwrap();
            let t2 = bellman_optimality(&q2, &mdp).unwrap();
            prop_assert!(t1.iter().zip(&t2).all(|(a, b)| a <= b));
        }

        #[test]
        fn solver_fixed_point_and_determinism(mdp in random_mdp()) {
            let a = solve_qstar(&mdp, 1e-10).unwrap();
            let b = solve_qstar(&mdp, 1e-10).unwrap();
            prop_assert!(a.residual <= 1e-10);
            prop_assert_eq!(&a.pi_star, &b.pi_star);
            let na = mdp.n_actions();
            for s in 0..mdp.n_states() {
                let row = &a.q_star[s * na..(s + 1) * na];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(row[a.pi_star[s]], m);
            }
            prop_assert!(a.gap_delta >= 0.0);
        }
    }
}
