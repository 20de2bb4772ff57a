//! The joint data chain of grid1x3: stationary law, contraction factor,
//! mixing profile and the stepsize advisory.

use qsalab::chain::{build_joint_chain, stepsize_advisory};
use qsalab::presets::grid1x3;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (mdp, policy) = grid1x3();
    let chain = build_joint_chain(&mdp, &policy)?;
    println!("joint states |X| = {}", chain.len());
    println!("μ(s,a) = {:.4?}", chain.mu_sa());
    println!("β = {:.5}", chain.beta());
    let profile = chain.mixing();
    println!("TV envelope {:.3} · {:.4}^k", profile.geo_c, profile.geo_rho);
    for (delta, t) in &profile.t_delta_table {
        println!("  t_δ at δ={delta:e}: {t:?}");
    }
    for alpha in [0.01, 0.1, 0.4] {
        let adv = stepsize_advisory(&chain, alpha, 1.0)?;
        println!("α={alpha}: α·t_α={:.3} vs bound {:.4} admissible={}", adv.lhs, adv.rhs, adv.admissible);
    }
    Ok(())
}
