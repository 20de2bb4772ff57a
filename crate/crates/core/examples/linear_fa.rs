//! Q-learning with linear features on the seeded random MDP: the
//! projected fixed point θ* and tail-averaged θ errors.

use qsalab::chain::build_joint_chain;
use qsalab::engine::{tail_average, Recording, RunOptions, Schedule};
use qsalab::lfa::{lfa_run, projected_value_iteration};
use qsalab::presets::lfa_random;
use qsalab::stats::l1_dist;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (mdp, policy, features) = lfa_random(0);
    let chain = build_joint_chain(&mdp, &policy)?;
    let pvi = projected_value_iteration(&mdp, &features, Some(chain.mu_sa()), 1e-12)?;
    println!("θ* = {:.4?} (residual {:.1e}, {} iterations)", pvi.theta, pvi.residual, pvi.iterations);
    let theta0: Vec<f64> = pvi.theta.iter().map(|v| v + 10.0).collect();
    let n = 500_000;
    let opts = RunOptions::with_recording(Recording::At(vec![n / 2]));
    for alpha in [0.1, 0.2, 0.4] {
        let trace = lfa_run(&mdp, &chain, &features, &Schedule::constant(alpha), &theta0, 5, n, &opts)?;
        let avg = tail_average(&trace, n / 2, n)?;
        println!("α={alpha}: ‖θ̄ − θ*‖₁ = {:.4}", l1_dist(&avg, &pvi.theta));
    }
    Ok(())
}
