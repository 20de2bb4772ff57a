//! Asynchronous Q-learning with constant stepsize: Markovian data, the
//! asymptotic bias of the iterates, tail averaging and Richardson-Romberg
//! extrapolation.

// NaN-rejecting guards are written as `!(x > 0.0)`; index loops read better
// than iterator chains in the dense linear algebra.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bias;
pub mod chain;
pub mod coupling;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod lfa;
pub mod mdp;
pub mod pipelines;
pub mod presets;
pub mod report;
pub mod stats;
