//! Analytic first-order bias B against simulation on grid1x3, on its
//! i.i.d. counterpart, and on the single-action chain with the same
//! state dynamics.

use qsalab::bias::{analytic_bias, empirical_bias, linearize, BiasBudget};
use qsalab::chain::{build_joint_chain, BehaviorPolicy};
use qsalab::mdp::{solve_qstar, Mdp};
use qsalab::presets::grid1x3;
use qsalab::stats::cosine;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (mdp, policy) = grid1x3();
    let chain = build_joint_chain(&mdp, &policy)?;
    let sol = solve_qstar(&mdp, 1e-12)?;
    let lin = linearize(&mdp, &chain, &sol)?;
    let b = analytic_bias(&lin, &chain)?;
    println!("B = {b:.4?} (eigenvalue gap {:.3e})", lin.eig_gap);

    let alphas = [0.02, 0.04, 0.08];
    let n = 2_000_000;
    let budget = BiasBudget { k0: Some(n / 2), ..BiasBudget::new(n, 20, 4) };
    let markov = empirical_bias(&mdp, &chain, &sol, &alphas, &budget)?;
    let iid = empirical_bias(&mdp, &chain.iid(), &sol, &alphas, &budget)?;
    for (m, i) in markov.empirical_points.iter().zip(&iid.empirical_points) {
        let diff: Vec<f64> = m.bias.iter().zip(&i.bias).map(|(a, b)| a - b).collect();
        let ab: Vec<f64> = b.iter().map(|v| m.alpha * v).collect();
        println!("α={}: Markov bias {:.4?}", m.alpha, m.bias);
        println!("        i.i.d. bias {:.4?}", i.bias);
        println!("        difference {:.4?} vs αB {:.4?} (cosine {:.3})", diff, ab, cosine(&diff, &ab));
    }
    println!(
        "Markov: order {:.3}, cosine(slope, B) {:.3}, RR order {:.3}",
        markov.fitted_order.unwrap(),
        markov.cosine_to_b.unwrap(),
        markov.rr_order.unwrap()
    );

    // fold the uniform behavior policy into the dynamics: no max left
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let kernel = (0..ns)
        .map(|s| vec![(0..ns).map(|t| (0..na).map(|a| mdp.kernel_row(s, a)[t]).sum::<f64>() / na as f64).collect()])
        .collect();
    let rewards = (0..ns).map(|s| vec![(0..na).map(|a| mdp.reward(s, a)).sum::<f64>() / na as f64]).collect();
    let mrp = Mdp::new(kernel, rewards, mdp.gamma(), None)?;
    let mrp_chain = build_joint_chain(&mrp, &BehaviorPolicy::uniform(ns, 1))?;
    let mrp_sol = solve_qstar(&mrp, 1e-12)?;
    let single = empirical_bias(&mrp, &mrp_chain, &mrp_sol, &alphas, &budget)?;
    println!(
        "single action: slope {:.3?} vs B {:.3?}, order {:.3}",
        single.fitted_slope,
        single.analytic_b.unwrap(),
        single.fitted_order.unwrap()
    );
    Ok(())
}
