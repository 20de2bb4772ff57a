//! One constant-stepsize run per α from q* + 10, tail-averaged, and the
//! Richardson-Romberg combination of the α and 2α averages.

use qsalab::chain::build_joint_chain;
use qsalab::engine::{rr_extrapolate, run, tail_average, Recording, RunOptions, Schedule};
use qsalab::mdp::{solve_qstar, DEFAULT_VI_TOL};
use qsalab::presets::grid1x3;
use qsalab::stats::l1_dist;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (mdp, policy) = grid1x3();
    let chain = build_joint_chain(&mdp, &policy)?;
    let sol = solve_qstar(&mdp, DEFAULT_VI_TOL)?;
    let q0: Vec<f64> = sol.q_star.iter().map(|v| v + 10.0).collect();
    let n = 1_000_000;
    let opts = RunOptions::with_recording(Recording::At(vec![n / 2]));
    let mut averages = Vec::new();
    for alpha in [0.1, 0.2] {
        let trace = run(&mdp, &chain, &Schedule::constant(alpha), &q0, 7, n, &opts)?;
        let avg = tail_average(&trace, n / 2, n)?;
        println!(
            "α={alpha}: last iterate error {:.4}, tail average error {:.4}",
            l1_dist(trace.final_iterate(), &sol.q_star),
            l1_dist(&avg, &sol.q_star)
        );
        averages.push(avg);
    }
    let rr = rr_extrapolate(&averages[0], &averages[1])?;
    println!("RR(0.1, 0.2) error {:.4}", l1_dist(&rr, &sol.q_star));
    Ok(())
}
