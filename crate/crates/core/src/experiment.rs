//! Config-driven experiment runner: a TOML spec in, CSV artifacts and a
//! replayable `manifest.toml` out.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chain::{build_joint_chain, BehaviorPolicy, JointChain};
use crate::engine::Schedule;
use crate::error::{QsaError, Result};
use crate::lfa::Features;
use crate::mdp::{solve_qstar, Mdp, OptimalSolution, DEFAULT_VI_TOL};
use crate::pipelines;
use crate::presets::build_preset;
use crate::report::{Summary, Table};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Solve,
    Chain,
    Convergence,
    Bias,
    Clt,
    Rr,
    Figure1,
    Lfa,
}

impl Pipeline {
    pub fn as_str(&self) -> &'static str {
        match self {
            Pipeline::Solve => "solve",
            Pipeline::Chain => "chain",
            Pipeline::Convergence => "convergence",
            Pipeline::Bias => "bias",
            Pipeline::Clt => "clt",
            Pipeline::Rr => "rr",
            Pipeline::Figure1 => "figure1",
            Pipeline::Lfa => "lfa",
        }
    }
}

/// An MDP given directly in the config. `policy` defaults to uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineMdp {
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_max: Option<f64>,
    /// `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
    /// `kernel[s][a][s']`.
    pub kernel: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Vec<Vec<f64>>>,
    /// Feature rows `φ(s,a)` in `s * |A| + a` order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
}

/// Knobs shared by several pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    /// Added to every coordinate of `q*` (or `θ*`) to get the start iterate.
    pub q0_offset: f64,
    /// Batch count for the CLT pipeline.
    pub batches: usize,
    pub z_threshold: f64,
    /// Log-spaced checkpoint count for the figure pipelines.
    pub checkpoints: usize,
    /// First step used by the coupled decay fit.
    pub decay_k_min: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            q0_offset: 10.0,
            batches: crate::diagnostics::DEFAULT_BATCHES,
            z_threshold: crate::diagnostics::DEFAULT_Z_THRESHOLD,
            checkpoints: 30,
            decay_k_min: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Seed for randomized presets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset_seed: Option<u64>,
    /// Constant stepsizes.
    #[serde(default)]
    pub stepsizes: Vec<f64>,
    /// Extra (diminishing) schedules for the figure pipelines.
    #[serde(default)]
    pub schedules: Vec<Schedule>,
    pub n: usize,
    /// Burn-in; when absent each pipeline picks its own default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<usize>,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub pipelines: Vec<Pipeline>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub options: PipelineOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mdp: Option<InlineMdp>,
}

fn one() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn invalid(msg: impl Into<String>) -> QsaError {
    QsaError::InvalidConfig(msg.into())
}

impl ExperimentSpec {
    /// Parses a spec, or the `spec` table of a previously written manifest.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        let value = match table.remove("spec") {
            Some(inner) => inner,
            None => toml::Value::Table(table),
        };
        value.try_into().map_err(|e: toml::de::Error| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    /// Burn-in for the bias pipeline; `None` defers to the mixing-based default.
    pub fn bias_k0(&self) -> Option<usize> {
        self.k0
    }

    /// Burn-in for the CLT and RR pipelines.
    pub fn tail_k0(&self) -> usize {
        self.k0.unwrap_or(self.n / 2)
    }

    /// Constant stepsizes whose double is also listed, ascending.
    pub fn rr_pairs(&self) -> Vec<(f64, f64)> {
        let mut alphas = self.stepsizes.clone();
        alphas.sort_by(f64::total_cmp);
        alphas
            .iter()
            .filter_map(|&a| alphas.iter().find(|&&b| (b - 2.0 * a).abs() <= 1e-12 * b).map(|&b| (a, b)))
            .collect()
    }

    /// Checks everything that can be checked without building the MDP.
    pub fn validate(&self) -> Result<()> {
        match (&self.preset, &self.mdp) {
            (Some(_), Some(_)) => return Err(invalid("give either `preset` or `[mdp]`, not both")),
            (None, None) => return Err(invalid("one of `preset` or `[mdp]` is required")),
            _ => {}
        }
        if self.n == 0 {
            return Err(invalid("n must be positive"));
        }
        if let Some(k0) = self.k0 {
            if k0 >= self.n {
                return Err(invalid(format!("need n > k0, got n={} k0={k0}", self.n)));
            }
        }
        if self.replications == 0 {
            return Err(invalid("replications must be ≥ 1"));
        }
        if self.master_seed > i64::MAX as u64 {
            return Err(invalid("master_seed must fit in a signed 64-bit integer"));
        }
        for &a in &self.stepsizes {
            if !(a > 0.0 && a < 1.0) {
                return Err(QsaError::InvalidSchedule(format!("stepsize {a} not in (0,1)")));
            }
        }
        for s in &self.schedules {
            s.validate()?;
        }
        let mut seen = HashSet::new();
        for p in &self.pipelines {
            if !seen.insert(p) {
                return Err(invalid(format!("pipeline `{}` listed twice", p.as_str())));
            }
        }
        let o = &self.options;
        if !o.q0_offset.is_finite() {
            return Err(invalid("q0_offset must be finite"));
        }
        let needs_alpha = [Pipeline::Convergence, Pipeline::Bias, Pipeline::Clt, Pipeline::Rr];
        for p in &self.pipelines {
            if needs_alpha.contains(p) && self.stepsizes.is_empty() {
                return Err(invalid(format!("pipeline `{}` needs at least one stepsize", p.as_str())));
            }
            if matches!(p, Pipeline::Figure1 | Pipeline::Lfa) && self.stepsizes.is_empty() && self.schedules.is_empty() {
                return Err(invalid(format!("pipeline `{}` needs stepsizes or schedules", p.as_str())));
            }
        }
        if self.pipelines.contains(&Pipeline::Rr) && self.rr_pairs().is_empty() {
            return Err(invalid("pipeline `rr` needs a stepsize α together with 2α"));
        }
        if self.pipelines.contains(&Pipeline::Clt) {
            if o.batches < crate::diagnostics::MIN_BATCHES {
                return Err(QsaError::TooFewBatches { min: crate::diagnostics::MIN_BATCHES, got: o.batches });
            }
            let span = self.n - self.tail_k0();
            if !span.is_multiple_of(o.batches) {
                return Err(invalid(format!("n − k0 = {span} is not divisible into {} batches", o.batches)));
            }
        }
        if self.pipelines.iter().any(|p| matches!(p, Pipeline::Figure1 | Pipeline::Lfa)) {
            if o.checkpoints < 2 {
                return Err(invalid("checkpoints must be ≥ 2"));
            }
            if self.n < 2 {
                return Err(invalid("figure pipelines need n ≥ 2"));
            }
        }
        Ok(())
    }
}

/// A validated spec with its MDP, chain and optimal solution resolved.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub spec: ExperimentSpec,
    pub mdp: Mdp,
    pub policy: BehaviorPolicy,
    pub features: Option<Features>,
    pub chain: JointChain,
    pub solution: OptimalSolution,
}

impl Experiment {
    pub fn build(spec: ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        let (mdp, policy, features) = if let Some(name) = &spec.preset {
            let p = build_preset(name, spec.preset_seed)?;
            (p.mdp, p.policy, p.features)
        } else {
            let m = spec.mdp.as_ref().expect("validated");
            let mdp = Mdp::new(m.kernel.clone(), m.rewards.clone(), m.gamma, m.r_max)?;
            let policy = match &m.policy {
                Some(rows) => BehaviorPolicy::new(rows.clone())?,
                None => BehaviorPolicy::uniform(mdp.n_states(), mdp.n_actions()),
            };
            let features = match &m.features {
                Some(rows) => {
                    let dim = rows.first().map_or(0, Vec::len);
                    if rows.iter().any(|r| r.len() != dim) {
                        return Err(QsaError::InvalidFeatures("feature rows differ in length".into()));
                    }
                    Some(Features::new(rows.len(), dim, rows.concat())?)
                }
                None => None,
            };
            (mdp, policy, features)
        };
        if spec.pipelines.contains(&Pipeline::Lfa) && features.is_none() {
            return Err(invalid("pipeline `lfa` needs features (preset lfa-random or mdp.features)"));
        }
        let chain = build_joint_chain(&mdp, &policy)?;
        let solution = solve_qstar(&mdp, DEFAULT_VI_TOL)?;
        Ok(Self { spec, mdp, policy, features, chain, solution })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub pipeline: String,
    pub rows: usize,
}

/// Everything needed to replay a run: its status, outputs and full spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default)]
    pub artifacts: Vec<Artifact>,
    pub spec: ExperimentSpec,
}

impl Manifest {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Result of [`run_pipelines`]: the written manifest plus, on failure,
/// the error that stopped the run.
#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub summary: Summary,
    pub error: Option<QsaError>,
}

/// Runs every pipeline of `spec` in order and writes the artifacts,
/// `summary.csv` and `manifest.toml` into `out_dir`.
///
/// Validation failures write nothing. A failure inside a pipeline still
/// writes what was produced before it, a `FAILED` marker and a manifest
/// with `status = "failed"`.
pub fn run_pipelines(spec: &ExperimentSpec, out_dir: &Path) -> Result<RunOutcome> {
    let exp = Experiment::build(spec.clone())?;
    let mut summary = Summary::default();
    let mut tables: Vec<(Pipeline, Table)> = Vec::new();
    let mut error = None;
    for &p in &spec.pipelines {
        log::info!("running pipeline {}", p.as_str());
        match pipelines::dispatch(&exp, p, &mut summary) {
            Ok(ts) => tables.extend(ts.into_iter().map(|t| (p, t))),
            Err(e) => {
                log::error!("pipeline {} failed: {e}", p.as_str());
                error = Some((p, e));
                break;
            }
        }
    }

    fs::create_dir_all(out_dir)?;
    let marker = out_dir.join(FAILURE_MARKER);
    let mut artifacts = Vec::new();
    for (p, t) in &tables {
        fs::write(out_dir.join(&t.file), t.render())?;
        artifacts.push(Artifact { file: t.file.clone(), pipeline: p.as_str().into(), rows: t.len() });
    }
    if !summary.table().is_empty() {
        let t = summary.table();
        fs::write(out_dir.join(&t.file), t.render())?;
        artifacts.push(Artifact { file: t.file.clone(), pipeline: "summary".into(), rows: t.len() });
    }
    let failure = error.as_ref().map(|(p, e)| format!("pipeline {}: {e}", p.as_str()));
    match &failure {
        Some(msg) => fs::write(&marker, format!("{msg}\n"))?,
        None if marker.exists() => fs::remove_file(&marker)?,
        None => {}
    }
    let manifest = Manifest {
        status: if failure.is_some() { "failed" } else { "ok" }.into(),
        failure,
        artifacts,
        spec: spec.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| invalid(e.to_string()))?;
    fs::write(out_dir.join(MANIFEST_FILE), text)?;
    Ok(RunOutcome { manifest, summary, error: error.map(|(_, e)| e) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentSpec {
        ExperimentSpec::from_toml("preset = \"grid1x3\"\nn = 100\n").unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let s = minimal();
        assert_eq!(s.replications, 1);
        assert_eq!(s.output_dir, PathBuf::from("out"));
        assert_eq!(s.options.batches, 50);
        assert!(s.pipelines.is_empty());
        s.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentSpec::from_toml("preset = \"grid1x3\"\nn = 10\nstepsize = 0.1\n").unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn invariants_enforced() {
        let mut s = minimal();
        s.k0 = Some(100);
        assert!(s.validate().is_err());
        let mut s = minimal();
        s.replications = 0;
        assert!(s.validate().is_err());
        let mut s = minimal();
        s.stepsizes = vec![0.1, -0.2];
        assert!(matches!(s.validate(), Err(QsaError::InvalidSchedule(_))));
        let mut s = minimal();
        s.stepsizes = vec![0.1, 0.3];
        s.pipelines = vec![Pipeline::Rr];
        assert!(s.validate().is_err());
        s.stepsizes = vec![0.1, 0.2, 0.3];
        s.validate().unwrap();
        assert_eq!(s.rr_pairs(), vec![(0.1, 0.2)]);
        let mut s = minimal();
        s.preset = None;
        assert!(s.validate().is_err());
    }

    #[test]
    fn clt_batches_must_divide() {
        let mut s = minimal();
        s.stepsizes = vec![0.1];
        s.pipelines = vec![Pipeline::Clt];
        s.n = 1000;
        s.k0 = Some(10);
        assert!(s.validate().is_err());
        s.k0 = Some(0);
        s.validate().unwrap();
        s.options.batches = 10;
        assert!(matches!(s.validate(), Err(QsaError::TooFewBatches { .. })));
    }

    #[test]
    fn spec_round_trips_through_manifest() {
        let text = r#"
preset = "grid1x3"
stepsizes = [0.1, 0.2]
schedules = [{ kind = "rescaled-linear", scale = 0.1 }, { kind = "polynomial", exponent = 0.75 }]
n = 1000
k0 = 500
replications = 3
master_seed = 9
pipelines = ["figure1", "bias"]
output_dir = "somewhere"

[options]
checkpoints = 5
"#;
        let spec = ExperimentSpec::from_toml(text).unwrap();
        assert_eq!(spec.schedules[1], Schedule::polynomial(0.75));
        let manifest = Manifest { status: "ok".into(), failure: None, artifacts: vec![], spec: spec.clone() };
        let written = toml::to_string(&manifest).unwrap();
        assert_eq!(ExperimentSpec::from_toml(&written).unwrap(), spec);
        assert_eq!(ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap(), spec);
    }

    #[test]
    fn inline_mdp_builds() {
        let text = r#"
n = 10
[mdp]
gamma = 0.5
rewards = [[1.0, 0.0], [0.0, 1.0]]
kernel = [[[0.5, 0.5], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]]]
"#;
        let exp = Experiment::build(ExperimentSpec::from_toml(text).unwrap()).unwrap();
        assert_eq!(exp.mdp.dim(), 4);
        assert!((exp.solution.q_star[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn empty_pipeline_list_writes_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_pipelines(&minimal(), dir.path()).unwrap();
        assert!(out.manifest.is_ok());
        assert!(out.manifest.artifacts.is_empty());
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("status = \"ok\""));
        assert!(!dir.path().join(FAILURE_MARKER).exists());
    }

    #[test]
    fn validation_failure_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = minimal();
        s.replications = 0;
        assert!(run_pipelines(&s, &dir.path().join("x")).is_err());
        assert!(!dir.path().join("x").exists());
    }
}
