//! Optimal Q-function, greedy policy and optimality gap of each preset.

use qsalab::mdp::{solve_qstar, DEFAULT_VI_TOL};
use qsalab::presets::{build_preset, PRESET_NAMES};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for name in PRESET_NAMES {
        let preset = build_preset(name, Some(0))?;
        let sol = solve_qstar(&preset.mdp, DEFAULT_VI_TOL)?;
        println!(
            "{name}: |S|={} |A|={} γ={} residual={:.1e} gap Δ={:.4} iterations={}",
            preset.mdp.n_states(),
            preset.mdp.n_actions(),
            preset.mdp.gamma(),
            sol.residual,
            sol.gap_delta,
            sol.iterations
        );
        println!("  greedy policy {:?}", sol.pi_star);
    }
    Ok(())
}
