//! Q-learning with linear function approximation `q ≈ Φ θ`.

use nalgebra::{DMatrix, DVector};

use crate::chain::JointChain;
use crate::engine::{Mode, RunOptions, RunTrace, Schedule};
use crate::error::{QsaError, Result};
use crate::mdp::{bellman_optimality, sup_norm, Mdp};

const RANK_TOL: f64 = 1e-10;
const NORM_SLACK: f64 = 1e-12;

/// Feature matrix Φ with one row `φ(s,a)` per state-action pair, in the
/// same `s * |A| + a` order as q-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    n_rows: usize,
    dim: usize,
    data: Vec<f64>,
    nonzero: Vec<Vec<usize>>,
}

impl Features {
    /// Checks `‖φ(s,a)‖₂ ≤ 1` for every row and full column rank.
    pub fn new(n_rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * dim {
            return Err(QsaError::DimensionMismatch { expected: n_rows * dim, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(QsaError::InvalidFeatures("non-finite entry".into()));
        }
        for (i, row) in data.chunks(dim).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1.0 + NORM_SLACK {
                return Err(QsaError::InvalidFeatures(format!("row {i} has norm {norm} > 1")));
            }
        }
        let rank = DMatrix::from_row_slice(n_rows, dim, &data).rank(RANK_TOL);
        if rank < dim {
            return Err(QsaError::RankDeficientFeatures { rank, dim });
        }
        let nonzero = data
            .chunks(dim)
            .map(|row| row.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect())
            .collect();
        Ok(Self { n_rows, dim, data, nonzero })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(n, n, data).expect("identity features are valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_rows, self.dim, &self.data)
    }

    /// `Φ θ`.
    pub fn q_of(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n_rows).map(|i| dot(self.row(i), theta)).collect()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs `θ_{k+1} = θ_k + α_k φ(s_k,a_k) (r_k + γ max_{a'} φ(s_{k+1},a')ᵀθ_k − φ(s_k,a_k)ᵀθ_k)`.
///
/// Only coordinates where `φ(s_k,a_k)` is nonzero are touched, so with
/// identity features the arithmetic is exactly the tabular update.
#[allow(clippy::too_many_arguments)]
pub fn lfa_run(
    mdp: &Mdp,
    chain: &JointChain,
    features: &Features,
    schedule: &Schedule,
    theta0: &[f64],
    seed: u64,
    n: usize,
    opts: &RunOptions,
) -> Result<RunTrace> {
    if n == 0 {
        return Err(QsaError::InvalidRange("run needs at least one step".into()));
    }
    if features.n_rows != mdp.dim() {
        return Err(QsaError::DimensionMismatch { expected: mdp.dim(), got: features.n_rows });
    }
    let d = features.dim;
    if theta0.len() != d {
        return Err(QsaError::DimensionMismatch { expected: d, got: theta0.len() });
    }
    schedule.validate()?;
    let points = opts.recording.points(n)?;
    let guard = 1e6 * sup_norm(theta0).max(mdp.r_max() / (1.0 - mdp.gamma())).max(1.0);
    let na = mdp.n_actions();
    let gamma = mdp.gamma();
    let triples = chain.states_x();
    let rewards = mdp.rewards();

    let mut theta = theta0.to_vec();
    let mut sum = vec![0.0; d];
    let mut last = vec![0usize; d];
    let mut ks = Vec::with_capacity(points.len());
    let mut iterates = Vec::with_capacity(points.len());
    let mut prefix = Vec::with_capacity(points.len());
    let mut next_point = 0;

    for (k, x) in chain.markov().trajectory(seed, opts.start.0).take(n).enumerate() {
        if points[next_point] == k {
            crate::engine::flush(&theta, &mut sum, &mut last, k);
            ks.push(k);
            iterates.push(theta.clone());
            prefix.push(sum.clone());
            next_point += 1;
        }
        let t = triples[x];
        let j = t.s * na + t.a;
        let phi = features.row(j);
        let best_next = (0..na)
            .map(|a| dot(features.row(t.next * na + a), &theta))
            .fold(f64::NEG_INFINITY, f64::max);
        let target = rewards[j] + gamma * best_next;
        let delta = target - dot(phi, &theta);
        let alpha = schedule.alpha(k);
        for &i in &features.nonzero[j] {
            sum[i] += theta[i] * (k + 1 - last[i]) as f64;
            last[i] = k + 1;
            let new = theta[i] + alpha * phi[i] * delta;
            if !new.is_finite() || new.abs() > guard {
                return Err(QsaError::NonFiniteIterate { step: k + 1 });
            }
            theta[i] = new;
        }
    }
    crate::engine::flush(&theta, &mut sum, &mut last, n);
    ks.push(n);
    iterates.push(theta);
    prefix.push(sum);
    Ok(RunTrace {
        mode: Mode::LinearFa { dim: d },
        schedule: Some(*schedule),
        seed,
        start: opts.start.0,
        q0: theta0.to_vec(),
        n,
        ks,
        iterates,
        prefix,
    })
}

/// Fixed point of projected value iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PviSolution {
    pub theta: Vec<f64>,
    /// `‖θ − Π T(Φθ)‖∞` at the returned θ.
    pub residual: f64,
    pub iterations: usize,
}

pub const PVI_MAX_ITERS: usize = 100_000;

/// Iterates `θ ← argmin_θ' ‖Φθ' − T(Φθ)‖_W` until `‖θ' − θ‖∞ ≤ tol`.
///
/// `weights` selects the projection norm: `None` is ordinary least squares,
/// `Some(w)` the `w`-weighted norm (all weights must be positive). With
/// `w = μ_S` the fixed point is the equilibrium of the mean LFA update.
pub fn projected_value_iteration(
    mdp: &Mdp,
    features: &Features,
    weights: Option<&[f64]>,
    tol: f64,
) -> Result<PviSolution> {
    if features.n_rows != mdp.dim() {
        return Err(QsaError::DimensionMismatch { expected: mdp.dim(), got: features.n_rows });
    }
    let projector = projector(features, weights)?;
    let phi = features.matrix();
    let apply = |theta: &DVector<f64>| -> Result<DVector<f64>> {
        let q: Vec<f64> = (&phi * theta).iter().copied().collect();
        let tq = bellman_optimality(&q, mdp)?;
        Ok(&projector * DVector::from_vec(tq))
    };
    let mut theta = DVector::zeros(features.dim);
    for it in 1..=PVI_MAX_ITERS {
        let next = apply(&theta)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(QsaError::NonFinite("projected value iteration".into()));
        }
        let change = (&next - &theta).amax();
        theta = next;
        if change <= tol {
            let residual = (apply(&theta)? - &theta).amax();
            return Ok(PviSolution { theta: theta.iter().copied().collect(), residual, iterations: it });
        }
        if it == PVI_MAX_ITERS {
            return Err(QsaError::NoConvergence { iterations: it, last_change: change });
        }
    }
    unreachable!()
}

/// `(ΦᵀWΦ)⁻¹ΦᵀW`.
fn projector(features: &Features, weights: Option<&[f64]>) -> Result<DMatrix<f64>> {
    let phi = features.matrix();
    let w = match weights {
        Some(w) => {
            if w.len() != features.n_rows {
                return Err(QsaError::DimensionMismatch { expected: features.n_rows, got: w.len() });
            }
            if w.iter().any(|v| !(*v > 0.0)) {
                return Err(QsaError::InvalidConfig("projection weights must be positive".into()));
            }
            DVector::from_column_slice(w)
        }
        None => DVector::from_element(features.n_rows, 1.0),
    };
    let phi_t_w = DMatrix::from_fn(features.dim, features.n_rows, |i, j| phi[(j, i)] * w[j]);
    let gram = &phi_t_w * &phi;
    let chol = gram
        .cholesky()
        .ok_or(QsaError::RankDeficientFeatures { rank: 0, dim: features.dim })?;
    Ok(chol.solve(&phi_t_w))
}
