//! Batch-means covariance, normality of batch means and the stationarity
//! (BAR) residual for one long grid1x3 run.

use qsalab::chain::build_joint_chain;
use qsalab::diagnostics::{bar_residual, clt_covariance};
use qsalab::engine::{run, Recording, RunOptions, Schedule};
use qsalab::mdp::{solve_qstar, DEFAULT_VI_TOL};
use qsalab::presets::grid1x3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (mdp, policy) = grid1x3();
    let chain = build_joint_chain(&mdp, &policy)?;
    let sol = solve_qstar(&mdp, DEFAULT_VI_TOL)?;
    let (k0, batches, len) = (100_000, 50, 20_000);
    let n = k0 + batches * len;
    let points = (0..=batches).map(|b| k0 + b * len).collect();
    let trace = run(&mdp, &chain, &Schedule::constant(0.1), &sol.q_star, 3, n, &RunOptions::with_recording(Recording::At(points)))?;
    let est = clt_covariance(&trace, k0, batches)?;
    println!("mean of q_∞ ≈ {:.4?}", est.mean_hat);
    println!("diag Σ̂ = {:.4?}", (0..est.sigma_hat.len()).map(|i| est.sigma_hat[i][i]).collect::<Vec<_>>());
    println!("skew z {:.2?}", est.normality.skew_z);
    println!("kurtosis z {:.2?} pass={}", est.normality.kurtosis_z, est.normality.pass);
    let bar = bar_residual(&trace, &mdp, &chain, k0)?;
    println!("BAR max residual {:.3e} over {} steps", bar.max_residual(), bar.steps);
    Ok(())
}
