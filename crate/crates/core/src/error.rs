use thiserror::Error;

/// Errors raised across the laboratory.
///
/// Variants split into two families: validation failures (bad inputs,
/// assumptions that do not hold) and numerical failures (divergence,
/// singular systems, missing convergence). [`QsaError::is_validation`]
/// tells them apart; the CLI maps them to different exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum QsaError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid behavior policy: {0}")]
    InvalidPolicy(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("joint chain is reducible ({components} strongly connected components)")]
    ReducibleChain { components: usize },

    #[error("joint chain is periodic with period {period}")]
    PeriodicChain { period: usize },

    #[error("mixing time exceeds cap {cap}; last TV distance {last_tv}")]
    CapExceeded { cap: usize, last_tv: f64, tv_curve: Vec<f64> },

    #[error("iterate diverged or became non-finite at step {step}")]
    NonFiniteIterate { step: usize },

    #[error("index {index} is not a recorded point of the trace")]
    MisalignedIndex { index: usize },

    #[error("invalid index range: {0}")]
    InvalidRange(String),

    #[error("feature matrix is rank deficient (rank {rank} < {dim})")]
    RankDeficientFeatures { rank: usize, dim: usize },

    #[error("invalid features: {0}")]
    InvalidFeatures(String),

    #[error("no convergence after {iterations} iterations (last change {last_change})")]
    NoConvergence { iterations: usize, last_change: f64 },

    #[error("optimal policy is not unique (gap = {gap})")]
    AssumptionViolated { gap: f64 },

    #[error("mean linearization is numerically singular (eigenvalue gap {eig_gap})")]
    SingularLinearization { eig_gap: f64 },

    #[error("fundamental matrix of the reversed chain is singular")]
    SingularFundamentalMatrix,

    #[error("need at least {min} batches, got {got}")]
    TooFewBatches { min: usize, got: usize },

    #[error("decay trace is too short or never decays: {0}")]
    InsufficientDecay(String),

    #[error("trace carries no replayable trajectory")]
    MissingTrajectory,

    #[error("invalid stepsize schedule: {0}")]
    InvalidSchedule(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(String),
}

impl QsaError {
    /// True for input/assumption failures, false for numerical ones.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            QsaError::DimensionMismatch { .. }
                | QsaError::InvalidMdp(_)
                | QsaError::InvalidPolicy(_)
                | QsaError::ReducibleChain { .. }
                | QsaError::PeriodicChain { .. }
                | QsaError::MisalignedIndex { .. }
                | QsaError::InvalidRange(_)
                | QsaError::RankDeficientFeatures { .. }
                | QsaError::InvalidFeatures(_)
                | QsaError::AssumptionViolated { .. }
                | QsaError::TooFewBatches { .. }
                | QsaError::MissingTrajectory
                | QsaError::InvalidSchedule(_)
                | QsaError::UnknownPreset(_)
                | QsaError::InvalidConfig(_)
        )
    }
}

impl From<std::io::Error> for QsaError {
    fn from(e: std::io::Error) -> Self {
        QsaError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, QsaError>;
