//! Asynchronous tabular Q-learning, tail averaging and Richardson-Romberg
//! extrapolation.

use serde::{Deserialize, Serialize};

use crate::chain::{JointChain, Start, Triple};
use crate::error::{QsaError, Result};
use crate::mdp::{max_over_actions, Mdp};

/// Stepsize sequence `α_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant { alpha: f64 },
    /// `α_k = 1 / (1 + scale · k)`.
    RescaledLinear { scale: f64 },
    /// `α_k = 1 / k^exponent`, with `α_0 = 1`.
    Polynomial { exponent: f64 },
}

impl Schedule {
    pub fn constant(alpha: f64) -> Self {
        Schedule::Constant { alpha }
    }

    /// `α_k = 1 / (1 + (1−γ) k)`.
    pub fn rescaled_linear(gamma: f64) -> Self {
        Schedule::RescaledLinear { scale: 1.0 - gamma }
    }

    pub fn polynomial(exponent: f64) -> Self {
        Schedule::Polynomial { exponent }
    }

    /// Constant stepsizes must lie in `[0, 1)`; `0` is admitted as the
    /// degenerate frozen run.
    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Constant { alpha } if (0.0..1.0).contains(&alpha) => Ok(()),
            Schedule::Constant { alpha } => Err(QsaError::InvalidSchedule(format!("constant stepsize {alpha} not in [0,1)"))),
            Schedule::RescaledLinear { scale } if scale > 0.0 && scale.is_finite() => Ok(()),
            Schedule::Polynomial { exponent } if exponent > 0.0 && exponent.is_finite() => Ok(()),
            other => Err(QsaError::InvalidSchedule(format!("{other:?}"))),
        }
    }

    #[inline]
    pub fn alpha(&self, k: usize) -> f64 {
        match *self {
            Schedule::Constant { alpha } => alpha,
            Schedule::RescaledLinear { scale } => 1.0 / (1.0 + scale * k as f64),
            Schedule::Polynomial { exponent } => {
                if k == 0 {
                    1.0
                } else {
                    (k as f64).powf(-exponent)
                }
            }
        }
    }

    pub fn constant_alpha(&self) -> Option<f64> {
        match *self {
            Schedule::Constant { alpha } => Some(alpha),
            _ => None,
        }
    }

    /// Short identifier used in CSV output.
    pub fn id(&self) -> String {
        match *self {
            Schedule::Constant { alpha } => format!("const-{alpha}"),
            Schedule::RescaledLinear { scale } => format!("rescaled-linear-{scale}"),
            Schedule::Polynomial { exponent } => format!("poly-{exponent}"),
        }
    }
}

/// The single nonzero entry of `F(x, q)`: index `(s,a)` and value
/// `r(s,a) + γ max_v q(s',v) − q(s,a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseUpdate {
    pub index: usize,
    pub value: f64,
}

/// Empirical Bellman operator `F(x, q)`.
#[inline]
pub fn empirical_bellman(x: Triple, q: &[f64], mdp: &Mdp) -> SparseUpdate {
    let na = mdp.n_actions();
    let index = x.s * na + x.a;
    let value = mdp.reward(x.s, x.a) + mdp.gamma() * max_over_actions(q, x.next, na) - q[index];
    SparseUpdate { index, value }
}

/// Dense form of [`empirical_bellman`].
pub fn empirical_bellman_dense(x: Triple, q: &[f64], mdp: &Mdp) -> Vec<f64> {
    let u = empirical_bellman(x, q, mdp);
    let mut out = vec![0.0; q.len()];
    out[u.index] = u.value;
    out
}

/// Which iterates a run keeps.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Recording {
    /// Stride 1 up to 10⁵ steps, `⌈n / 10⁵⌉` beyond.
    #[default]
    Auto,
    Stride(usize),
    /// Exactly these iterate indices (plus 0 and n).
    At(Vec<usize>),
}

const AUTO_RECORD_POINTS: usize = 100_000;

impl Recording {
    pub(crate) fn points(&self, n: usize) -> Result<Vec<usize>> {
        let mut pts = match self {
            Recording::Auto => {
                let stride = if n <= AUTO_RECORD_POINTS { 1 } else { n.div_ceil(AUTO_RECORD_POINTS) };
                (0..=n).step_by(stride).collect::<Vec<_>>()
            }
            Recording::Stride(0) => return Err(QsaError::InvalidConfig("recording stride must be ≥ 1".into())),
            Recording::Stride(s) => (0..=n).step_by(*s).collect(),
            Recording::At(ks) => {
                let mut v: Vec<usize> = ks.iter().copied().filter(|&k| k <= n).collect();
                v.push(0);
                v
            }
        };
        pts.push(n);
        pts.sort_unstable();
        pts.dedup();
        Ok(pts)
    }
}

/// How the iterates were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Tabular,
    LinearFa { dim: usize },
    /// Built from caller-supplied iterates; nothing to replay.
    Synthetic,
}

/// Recorded iterates of one run together with everything needed to
/// replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub mode: Mode,
    pub schedule: Option<Schedule>,
    pub seed: u64,
    pub start: Start,
    pub q0: Vec<f64>,
    /// Number of updates performed; iterates run from `q_0` to `q_n`.
    pub n: usize,
    /// Recorded iterate indices, strictly increasing, always `0` and `n`.
    pub ks: Vec<usize>,
    pub iterates: Vec<Vec<f64>>,
    /// `prefix[i] = Σ_{t < ks[i]} q_t`, accumulated at full resolution.
    pub prefix: Vec<Vec<f64>>,
}

impl RunTrace {
    /// Full-resolution synthetic trace `q_0, …, q_n`.
    pub fn from_iterates(iterates: Vec<Vec<f64>>) -> Result<Self> {
        if iterates.is_empty() {
            return Err(QsaError::InvalidRange("empty trace".into()));
        }
        let d = iterates[0].len();
        if let Some(bad) = iterates.iter().find(|q| q.len() != d) {
            return Err(QsaError::DimensionMismatch { expected: d, got: bad.len() });
        }
        let mut prefix = Vec::with_capacity(iterates.len());
        let mut acc = vec![0.0; d];
        for q in &iterates {
            prefix.push(acc.clone());
            for (a, v) in acc.iter_mut().zip(q) {
                *a += v;
            }
        }
        let n = iterates.len() - 1;
        Ok(Self {
            mode: Mode::Synthetic,
            schedule: None,
            seed: 0,
            start: Start::Stationary,
            q0: iterates[0].clone(),
            n,
            ks: (0..=n).collect(),
            iterates,
            prefix,
        })
    }

    pub fn final_iterate(&self) -> &[f64] {
        self.iterates.last().expect("trace always records q_n")
    }

    pub fn dim(&self) -> usize {
        self.q0.len()
    }

    /// Position of iterate index `k` among the recorded points.
    pub fn position(&self, k: usize) -> Result<usize> {
        self.ks.binary_search(&k).map_err(|_| QsaError::MisalignedIndex { index: k })
    }

    pub fn iterate_at(&self, k: usize) -> Result<&[f64]> {
        Ok(&self.iterates[self.position(k)?])
    }

    pub fn prefix_at(&self, k: usize) -> Result<&[f64]> {
        Ok(&self.prefix[self.position(k)?])
    }
}

/// Per-step hook: `(k, x_k, x_{k+1}, q_{k+1}, changed index, q_k at that index)`.
pub(crate) trait StepObserver {
    fn observe(&mut self, k: usize, x: usize, x_next: usize, q_next: &[f64], changed: usize, old: f64);
}

impl StepObserver for () {
    #[inline]
    fn observe(&mut self, _: usize, _: usize, _: usize, _: &[f64], _: usize, _: f64) {}
}

/// Options shared by tabular and LFA runs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOptions {
    pub start: StartOpt,
    pub recording: Recording,
}

/// Wrapper so that [`RunOptions`] can derive `Default` with a stationary start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StartOpt(pub Start);

impl Default for StartOpt {
    fn default() -> Self {
        StartOpt(Start::Stationary)
    }
}

impl RunOptions {
    pub fn with_recording(recording: Recording) -> Self {
        Self { recording, ..Self::default() }
    }
}

/// Runs `n` asynchronous Q-learning updates
/// `q_{k+1} = q_k + α_k F(x_k, q_k)` on the seeded data stream.
pub fn run(
    mdp: &Mdp,
    chain: &JointChain,
    schedule: &Schedule,
    q0: &[f64],
    seed: u64,
    n: usize,
    opts: &RunOptions,
) -> Result<RunTrace> {
    run_observed(mdp, chain, schedule, q0, seed, n, opts, &mut ())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_observed<O: StepObserver>(
    mdp: &Mdp,
    chain: &JointChain,
    schedule: &Schedule,
    q0: &[f64],
    seed: u64,
    n: usize,
    opts: &RunOptions,
    observer: &mut O,
) -> Result<RunTrace> {
    if n == 0 {
        return Err(QsaError::InvalidRange("run needs at least one step".into()));
    }
    let d = mdp.dim();
    if q0.len() != d {
        return Err(QsaError::DimensionMismatch { expected: d, got: q0.len() });
    }
    if chain.n_states() != mdp.n_states() || chain.n_actions() != mdp.n_actions() {
        return Err(QsaError::InvalidConfig("chain was built for a different MDP".into()));
    }
    schedule.validate()?;
    let points = opts.recording.points(n)?;
    let guard = 10.0 * mdp.q_max(q0);
    let na = mdp.n_actions();
    let gamma = mdp.gamma();
    let triples = chain.states_x();
    let rewards = mdp.rewards();

    let mut q = q0.to_vec();
    let mut sum = vec![0.0; d];
    let mut last = vec![0usize; d];
    let mut ks = Vec::with_capacity(points.len());
    let mut iterates = Vec::with_capacity(points.len());
    let mut prefix = Vec::with_capacity(points.len());
    let mut next_point = 0;

    let mut stream = chain.markov().trajectory(seed, opts.start.0);
    let mut x = stream.next().unwrap();
    for k in 0..n {
        if points[next_point] == k {
            flush(&q, &mut sum, &mut last, k);
            ks.push(k);
            iterates.push(q.clone());
            prefix.push(sum.clone());
            next_point += 1;
        }
        let x_next = stream.next().unwrap();
        let t = triples[x];
        let j = t.s * na + t.a;
        let alpha = schedule.alpha(k);
        let old = q[j];
        let target = rewards[j] + gamma * max_over_actions(&q, t.next, na);
        let new = old + alpha * (target - old);
        if !new.is_finite() || new.abs() > guard {
            return Err(QsaError::NonFiniteIterate { step: k + 1 });
        }
        sum[j] += old * (k + 1 - last[j]) as f64;
        last[j] = k + 1;
        q[j] = new;
        observer.observe(k, x, x_next, &q, j, old);
        x = x_next;
    }
    flush(&q, &mut sum, &mut last, n);
    ks.push(n);
    iterates.push(q);
    prefix.push(sum);

    Ok(RunTrace {
        mode: Mode::Tabular,
        schedule: Some(*schedule),
        seed,
        start: opts.start.0,
        q0: q0.to_vec(),
        n,
        ks,
        iterates,
        prefix,
    })
}

#[inline]
pub(crate) fn flush(q: &[f64], sum: &mut [f64], last: &mut [usize], k: usize) {
    for j in 0..q.len() {
        sum[j] += q[j] * (k - last[j]) as f64;
        last[j] = k;
    }
}

/// Tail average `(1/(k−k0)) Σ_{t=k0}^{k−1} q_t`. `k0` must be a recorded
/// point; `k` a recorded point or `n + 1` (window ending at `q_n`).
pub fn tail_average(trace: &RunTrace, k0: usize, k: usize) -> Result<Vec<f64>> {
    let len = trace.n + 1;
    if k0 >= k || k > len {
        return Err(QsaError::InvalidRange(format!("need 0 ≤ k0 < k ≤ {len}, got k0={k0}, k={k}")));
    }
    let lo = trace.prefix_at(k0)?;
    let w = (k - k0) as f64;
    if k == len {
        // window includes the final iterate q_n
        let hi = trace.prefix_at(trace.n)?;
        let qn = trace.final_iterate();
        return Ok(hi.iter().zip(qn).zip(lo).map(|((h, q), l)| (h + q - l) / w).collect());
    }
    let hi = trace.prefix_at(k)?;
    Ok(hi.iter().zip(lo).map(|(h, l)| (h - l) / w).collect())
}

/// Richardson-Romberg combination `2 q̄(α) − q̄(2α)`.
pub fn rr_extrapolate(qbar_alpha: &[f64], qbar_2alpha: &[f64]) -> Result<Vec<f64>> {
    if qbar_alpha.len() != qbar_2alpha.len() {
        return Err(QsaError::DimensionMismatch { expected: qbar_alpha.len(), got: qbar_2alpha.len() });
    }
    Ok(qbar_alpha.iter().zip(qbar_2alpha).map(|(a, b)| 2.0 * a - b).collect())
}
