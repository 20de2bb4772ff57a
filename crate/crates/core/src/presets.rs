//! Built-in experiment MDPs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::BehaviorPolicy;
use crate::error::{QsaError, Result};
use crate::lfa::Features;
use crate::mdp::Mdp;

/// An MDP, its behavior policy and (for function approximation) features.
#[derive(Debug, Clone)]
pub struct Preset {
    pub name: String,
    pub mdp: Mdp,
    pub policy: BehaviorPolicy,
    pub features: Option<Features>,
}

pub const PRESET_NAMES: [&str; 3] = ["grid1x3", "grid4x4", "lfa-random"];

/// Looks up a preset by name. `seed` only affects `lfa-random` (default 0).
pub fn build_preset(name: &str, seed: Option<u64>) -> Result<Preset> {
    let (mdp, policy, features) = match name {
        "grid1x3" => {
            let (m, p) = grid1x3();
            (m, p, None)
        }
        "grid4x4" => {
            let (m, p) = grid4x4();
            (m, p, None)
        }
        "lfa-random" => {
            let (m, p, f) = lfa_random(seed.unwrap_or(0));
            (m, p, Some(f))
        }
        other => return Err(QsaError::UnknownPreset(other.to_string())),
    };
    Ok(Preset { name: name.to_string(), mdp, policy, features })
}

/// Three cells in a row, actions left (0) and right (1).
///
/// Walking off the edge costs −4 and leaves the agent in place; any other
/// move succeeds with probability 0.95 (else the agent stays) and pays the
/// state reward `r = (0, 10, 0.5)`. Discount 0.9, uniform behavior.
pub fn grid1x3() -> (Mdp, BehaviorPolicy) {
    const N: usize = 3;
    const STATE_REWARD: [f64; N] = [0.0, 10.0, 0.5];
    const OFF_GRID: f64 = -4.0;
    let mut kernel = vec![vec![vec![0.0; N]; 2]; N];
    let mut rewards = vec![vec![0.0; 2]; N];
    for s in 0..N {
        for (a, step) in [-1i64, 1].into_iter().enumerate() {
            let target = s as i64 + step;
            if target < 0 || target >= N as i64 {
                kernel[s][a][s] = 1.0;
                rewards[s][a] = OFF_GRID;
            } else {
                kernel[s][a][target as usize] = 0.95;
                kernel[s][a][s] = 0.05;
                rewards[s][a] = STATE_REWARD[s];
            }
        }
    }
    let mdp = Mdp::new(kernel, rewards, 0.9, None).expect("grid1x3 is well-formed");
    (mdp, BehaviorPolicy::uniform(N, 2))
}

/// Grid coordinates `(row, col)` of the teleport cells of [`grid4x4`]:
/// `A → A'` and `B → B'`.
pub const GRID4_A: (usize, usize) = (0, 1);
pub const GRID4_A_PRIME: (usize, usize) = (3, 1);
pub const GRID4_B: (usize, usize) = (0, 3);
pub const GRID4_B_PRIME: (usize, usize) = (2, 3);

/// 4×4 slippery gridworld, actions left/up/right/down (0..4), state index
/// `4 * row + col`.
///
/// The intended move happens with probability 0.9 and each perpendicular
/// move with 0.05; a move off the grid leaves the agent in place. An
/// intended move off the grid pays −1. From `A` (`B`) every action jumps
/// to `A'` (`B'`) paying 10 (5). All other rewards are 0. Discount 0.9,
/// uniform behavior.
pub fn grid4x4() -> (Mdp, BehaviorPolicy) {
    const W: usize = 4;
    const N: usize = W * W;
    // (drow, dcol) for left, up, right, down
    const DIRS: [(i64, i64); 4] = [(0, -1), (-1, 0), (0, 1), (1, 0)];
    let idx = |(r, c): (usize, usize)| r * W + c;
    let shift = |s: usize, d: usize| -> Option<usize> {
        let (r, c) = ((s / W) as i64 + DIRS[d].0, (s % W) as i64 + DIRS[d].1);
        (r >= 0 && r < W as i64 && c >= 0 && c < W as i64).then(|| r as usize * W + c as usize)
    };
    let mut kernel = vec![vec![vec![0.0; N]; 4]; N];
    let mut rewards = vec![vec![0.0; 4]; N];
    for s in 0..N {
        for a in 0..4 {
            if s == idx(GRID4_A) {
                kernel[s][a][idx(GRID4_A_PRIME)] = 1.0;
                rewards[s][a] = 10.0;
                continue;
            }
            if s == idx(GRID4_B) {
                kernel[s][a][idx(GRID4_B_PRIME)] = 1.0;
                rewards[s][a] = 5.0;
                continue;
            }
            let perpendicular = [(a + 1) % 4, (a + 3) % 4];
            for (d, p) in [(a, 0.9), (perpendicular[0], 0.05), (perpendicular[1], 0.05)] {
                let target = shift(s, d).unwrap_or(s);
                kernel[s][a][target] += p;
            }
            rewards[s][a] = if shift(s, a).is_none() { -1.0 } else { 0.0 };
        }
    }
    let mdp = Mdp::new(kernel, rewards, 0.9, None).expect("grid4x4 is well-formed");
    (mdp, BehaviorPolicy::uniform(N, 4))
}

pub const LFA_STATES: usize = 20;
pub const LFA_ACTIONS: usize = 5;
pub const LFA_DIM: usize = 10;

/// Random 20-state, 5-action MDP with `d = 10` Bernoulli(0.5) features,
/// each feature row scaled to unit ℓ2 norm (zero rows stay zero) and the
/// whole matrix redrawn until it has full column rank. Discount 0.5.
pub fn lfa_random(seed: u64) -> (Mdp, BehaviorPolicy, Features) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernel = Vec::with_capacity(LFA_STATES);
    let mut rewards = Vec::with_capacity(LFA_STATES);
    for _ in 0..LFA_STATES {
        let mut rows = Vec::with_capacity(LFA_ACTIONS);
        let mut rs = Vec::with_capacity(LFA_ACTIONS);
        for _ in 0..LFA_ACTIONS {
            rs.push(rng.random::<f64>());
            let raw: Vec<f64> = (0..LFA_STATES).map(|_| rng.random::<f64>()).collect();
            let z: f64 = raw.iter().sum();
            rows.push(raw.into_iter().map(|v| v / z).collect());
        }
        kernel.push(rows);
        rewards.push(rs);
    }
    let mdp = Mdp::new(kernel, rewards, 0.5, Some(1.0)).expect("random MDP is well-formed");
    let features = loop {
        let mut rows = Vec::with_capacity(LFA_STATES * LFA_ACTIONS * LFA_DIM);
        for _ in 0..LFA_STATES * LFA_ACTIONS {
            let raw: Vec<f64> = (0..LFA_DIM).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            rows.extend(raw.into_iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }));
        }
        if let Ok(f) = Features::new(LFA_STATES * LFA_ACTIONS, LFA_DIM, rows) {
            break f;
        }
    };
    (mdp, BehaviorPolicy::uniform(LFA_STATES, LFA_ACTIONS), features)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid1x3_literal_table() {
        let (mdp, policy) = grid1x3();
        assert_eq!((mdp.n_states(), mdp.n_actions(), mdp.gamma()), (3, 2, 0.9));
        let expected_rewards = [[-4.0, 0.0], [10.0, 10.0], [0.5, -4.0]];
        let expected_kernel = [
            [[1.0, 0.0, 0.0], [0.05, 0.95, 0.0]],
            [[0.95, 0.05, 0.0], [0.0, 0.05, 0.95]],
            [[0.0, 0.95, 0.05], [0.0, 0.0, 1.0]],
        ];
        for s in 0..3 {
            for a in 0..2 {
                assert_eq!(mdp.reward(s, a), expected_rewards[s][a]);
                assert_eq!(mdp.kernel_row(s, a), &expected_kernel[s][a]);
                assert_eq!(policy.prob(s, a), 0.5);
            }
        }
    }

    #[test]
    fn grid4x4_structure() {
        let (mdp, policy) = grid4x4();
        assert_eq!((mdp.n_states(), mdp.n_actions(), mdp.gamma()), (16, 4, 0.9));
        let mut values: Vec<f64> = mdp.rewards().to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        assert_eq!(values, vec![-1.0, 0.0, 5.0, 10.0]);
        // A = (0,1) jumps to A' = (3,1) with reward 10
        for a in 0..4 {
            assert_eq!(mdp.kernel_row(1, a)[13], 1.0);
            assert_eq!(mdp.reward(1, a), 10.0);
            assert_eq!(mdp.kernel_row(3, a)[11], 1.0);
            assert_eq!(mdp.reward(3, a), 5.0);
        }
        // state 5 = (1,1), intend right: 0.9 to (1,2), 0.05 up to (0,1), 0.05 down to (2,1)
        let row = mdp.kernel_row(5, 2);
        assert_eq!((row[6], row[1], row[9]), (0.9, 0.05, 0.05));
        // corner (0,0) intends left: off grid, pays −1, stays with 0.9 + up 0.05 also off grid
        assert_eq!(mdp.reward(0, 0), -1.0);
        assert!((mdp.kernel_row(0, 0)[0] - 0.95).abs() < 1e-15);
        assert!((mdp.kernel_row(0, 0)[4] - 0.05).abs() < 1e-15);
        assert_eq!(policy.prob(7, 3), 0.25);
    }

    #[test]
    fn lfa_random_is_seeded_and_normalized() {
        let (m1, _, f1) = lfa_random(7);
        let (m2, _, f2) = lfa_random(7);
        assert_eq!(m1, m2);
        assert_eq!(f1, f2);
        assert_eq!((m1.n_states(), m1.n_actions(), m1.gamma()), (20, 5, 0.5));
        assert_eq!(f1.dim(), 10);
        assert!(m1.rewards().iter().all(|r| (0.0..=1.0).contains(r)));
        for i in 0..100 {
            let norm: f64 = f1.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1.0 + 1e-12);
        }
        let (m3, _, _) = lfa_random(8);
        assert_ne!(m1, m3);
    }

    #[test]
    fn unknown_preset() {
        assert_eq!(build_preset("nope", None).unwrap_err(), QsaError::UnknownPreset("nope".into()));
    }
}
