//! `qsalab <subcommand> --config <file> [--seed N] [--out DIR]`
//!
//! Exit codes: 0 success, 2 validation failure, 3 numerical failure,
//! 1 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qsalab::error::QsaError;
use qsalab::experiment::{run_pipelines, Experiment, ExperimentSpec, Pipeline};
use qsalab::mdp::{bellman_optimality, sup_norm};

#[derive(Parser)]
#[command(name = "qsalab", version, about = "Constant-stepsize Q-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment spec (TOML), or a manifest.toml from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; beats `QSALAB_OUT`, which beats `output_dir`.
    #[arg(long, env = "QSALAB_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the spec, MDP and data chain without running anything.
    Validate(Common),
    /// Optimal Q-function and greedy policy.
    Solve(Common),
    /// Stationary law, mixing profile and stepsize advisory.
    Chain(Common),
    /// Every pipeline listed in the spec.
    Run(Common),
    /// Coupled runs and geometric decay fit.
    Convergence(Common),
    /// Empirical bias against the analytic first-order term.
    Bias(Common),
    /// Batch-means covariance and normality checks.
    Clt(Common),
    /// Richardson-Romberg bias reduction.
    Rr(Common),
    /// Error curves of tail-averaged, extrapolated and diminishing-stepsize iterates.
    Figure1(Common),
    /// Figure curves for linear function approximation.
    Lfa(Common),
}

fn exit_code(e: &QsaError) -> u8 {
    match e {
        QsaError::Io(_) => 1,
        e if e.is_validation() => 2,
        _ => 3,
    }
}

fn load(common: &Common, only: Option<Pipeline>) -> Result<(ExperimentSpec, PathBuf), QsaError> {
    let mut spec = ExperimentSpec::load(&common.config)?;
    if let Some(seed) = common.seed {
        spec.master_seed = seed;
    }
    if let Some(out) = &common.out {
        spec.output_dir = out.clone();
    }
    if let Some(p) = only {
        spec.pipelines = vec![p];
    }
    let out = spec.output_dir.clone();
    Ok((spec, out))
}

fn validate(common: &Common) -> Result<(), QsaError> {
    let (spec, _) = load(common, None)?;
    let exp = Experiment::build(spec)?;
    let residual = sup_norm(
        &bellman_optimality(&exp.solution.q_star, &exp.mdp)?
            .iter()
            .zip(&exp.solution.q_star)
            .map(|(t, q)| t - q)
            .collect::<Vec<_>>(),
    );
    println!("states {} actions {} gamma {}", exp.mdp.n_states(), exp.mdp.n_actions(), exp.mdp.gamma());
    println!("joint chain states {} beta {}", exp.chain.len(), exp.chain.beta());
    println!("bellman residual {residual:e} gap {}", exp.solution.gap_delta);
    if !exp.solution.has_unique_policy() {
        println!("note: optimal action is not unique; the analytic bias uses the lowest-index tie");
    }
    println!("ok");
    Ok(())
}

fn execute(common: &Common, only: Option<Pipeline>) -> Result<(), QsaError> {
    let (spec, out) = load(common, only)?;
    let outcome = run_pipelines(&spec, &out)?;
    for a in &outcome.manifest.artifacts {
        println!("{} ({} rows)", out.join(&a.file).display(), a.rows);
    }
    println!("{}", out.join(qsalab::experiment::MANIFEST_FILE).display());
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate(c) => validate(c),
        Command::Run(c) => execute(c, None),
        Command::Solve(c) => execute(c, Some(Pipeline::Solve)),
        Command::Chain(c) => execute(c, Some(Pipeline::Chain)),
        Command::Convergence(c) => execute(c, Some(Pipeline::Convergence)),
        Command::Bias(c) => execute(c, Some(Pipeline::Bias)),
        Command::Clt(c) => execute(c, Some(Pipeline::Clt)),
        Command::Rr(c) => execute(c, Some(Pipeline::Rr)),
        Command::Figure1(c) => execute(c, Some(Pipeline::Figure1)),
        Command::Lfa(c) => execute(c, Some(Pipeline::Lfa)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
