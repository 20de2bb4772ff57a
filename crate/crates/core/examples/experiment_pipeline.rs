//! A spec-driven run writing CSV artifacts and a replayable manifest.

use qsalab::experiment::{run_pipelines, ExperimentSpec};

const SPEC: &str = r#"
preset = "grid4x4"
stepsizes = [0.1, 0.2, 0.4]
schedules = [
    { kind = "rescaled-linear", scale = 0.1 },
    { kind = "polynomial", exponent = 0.75 },
]
n = 200000
replications = 4
master_seed = 1
pipelines = ["solve", "chain", "figure1"]
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ExperimentSpec::from_toml(SPEC)?;
    let out = std::env::temp_dir().join("qsalab-example");
    let outcome = run_pipelines(&spec, &out)?;
    for a in &outcome.manifest.artifacts {
        println!("{} {} rows", out.join(&a.file).display(), a.rows);
    }
    print!("{}", outcome.summary.table().render());
    Ok(())
}
