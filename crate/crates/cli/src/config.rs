//! Experiment configuration: one JSON file per run.
//!
//! Parsing is two-pass. The text is first deserialized strictly so unknown
//! keys and type errors carry serde's line and column. The user's keys are
//! then laid over the preset for the chosen experiment, so an omitted block
//! or field takes the experiment's tuned value rather than a generic default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use brhier_core::envs::{PendulumSpec, PlantSpec};
use brhier_core::shs::ShsConfig;
use brhier_core::supervised::{ClassificationTask, SupervisedConfig, REGRESSION_NOISE};
use brhier_core::tabular::SolverOptions;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    BaSweep,
    Classify,
    Regress,
    Plant,
    Pendulum,
}

impl ExperimentKind {
    pub fn is_control(self) -> bool {
        matches!(self, ExperimentKind::Plant | ExperimentKind::Pendulum)
    }

    pub fn is_supervised(self) -> bool {
        matches!(self, ExperimentKind::Classify | ExperimentKind::Regress)
    }
}

/// Geometric grid from `low` to `high`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub low: f64,
    pub high: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaSweepConfig {
    /// Utility table `U[s][a]`; drawn uniformly from `[0, 1)` when absent.
    pub utility: Option<Vec<Vec<f64>>>,
    pub n_states: usize,
    pub n_actions: usize,
    pub n_experts: usize,
    pub beta1: GridSpec,
    pub beta2: GridSpec,
    pub solver: SolverOptions,
}

impl Default for BaSweepConfig {
    fn default() -> Self {
        Self {
            utility: None,
            n_states: 4,
            n_actions: 4,
            n_experts: 2,
            beta1: GridSpec { low: 0.1, high: 100.0, points: 4 },
            beta2: GridSpec { low: 0.1, high: 100.0, points: 4 },
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyConfig {
    pub task: ClassificationTask,
    pub n_samples: usize,
    pub noise: f64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self { task: ClassificationTask::XorBlobs, n_samples: 1000, noise: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressConfig {
    pub n_samples: usize,
    pub noise: f64,
}

impl Default for RegressConfig {
    fn default() -> Self {
        Self { n_samples: 1000, noise: REGRESSION_NOISE }
    }
}

/// Greedy-policy evaluation after control runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { episodes: 100, seed: 99 }
    }
}

/// Pass/fail bounds checked by `summarize`. Unset bounds are not checked.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    /// Greedy evaluation reward for control runs, final mean utility otherwise.
    pub min_mean_reward: Option<f64>,
    pub min_mi_bits: Option<f64>,
    pub usage_range: Option<[f64; 2]>,
    pub min_accuracy: Option<f64>,
    pub max_mse: Option<f64>,
    /// Largest relative deviation of a learned plant gain from the Riccati gain.
    pub max_gain_error: Option<f64>,
    /// Largest relative shortfall of the greedy reward against the switched LQR.
    pub max_reward_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Authoritative seed; copied into every block that has one.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ba_sweep: BaSweepConfig,
    #[serde(default)]
    pub classify: ClassifyConfig,
    #[serde(default)]
    pub regress: RegressConfig,
    #[serde(default)]
    pub plant: PlantSpec,
    #[serde(default)]
    pub pendulum: PendulumSpec,
    #[serde(default)]
    pub shs: ShsConfig,
    #[serde(default)]
    pub supervised: SupervisedConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Tuned defaults for one experiment.
    pub fn preset(kind: ExperimentKind) -> Self {
        let mut c = Self {
            experiment: kind,
            seed: 0,
            output_dir: default_output_dir(),
            ba_sweep: BaSweepConfig::default(),
            classify: ClassifyConfig::default(),
            regress: RegressConfig::default(),
            plant: PlantSpec::default(),
            pendulum: PendulumSpec::default(),
            shs: ShsConfig::default(),
            supervised: SupervisedConfig::default(),
            evaluation: EvaluationConfig::default(),
            thresholds: Thresholds::default(),
        };
        match kind {
            ExperimentKind::Plant => {
                c.shs = ShsConfig::plant();
                c.evaluation.episodes = 1000;
                c.thresholds = Thresholds {
                    min_mi_bits: Some(0.7),
                    usage_range: Some([0.35, 0.65]),
                    max_gain_error: Some(0.25),
                    max_reward_gap: Some(0.15),
                    ..Default::default()
                };
            }
            ExperimentKind::Pendulum => c.shs = ShsConfig::pendulum(),
            ExperimentKind::Classify => c.thresholds.min_accuracy = Some(0.9),
            ExperimentKind::Regress => c.supervised = SupervisedConfig::regression(),
            ExperimentKind::BaSweep => {}
        }
        c
    }

    /// Parses and validates config text. `origin` names the source in messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let strict: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
        let user: Value = serde_json::from_str(text).expect("text already parsed");
        let mut merged = serde_json::to_value(Self::preset(strict.experiment)).expect("config serializes");
        overlay(&mut merged, user);
        let mut config: ExperimentConfig =
            serde_json::from_value(merged).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        config.propagate_seed();
        config.validate().map_err(|(key, msg)| {
            let line = locate(text, key).or_else(|| locate(text, "experiment")).unwrap_or(1);
            CliError::Config(format!("{origin}:{line}: {key}: {msg}"))
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        self.shs.seed = self.seed;
        self.supervised.seed = self.seed;
        self.ba_sweep.solver.seed = self.seed;
    }

    /// Training length: iterations for control runs, epochs for supervised ones.
    pub fn iterations(&self) -> usize {
        match self.experiment {
            ExperimentKind::Plant | ExperimentKind::Pendulum => self.shs.iterations,
            ExperimentKind::Classify | ExperimentKind::Regress => self.supervised.epochs,
            ExperimentKind::BaSweep => 0,
        }
    }

    pub fn set_iterations(&mut self, n: usize) {
        match self.experiment {
            ExperimentKind::Plant | ExperimentKind::Pendulum => self.shs.iterations = n,
            ExperimentKind::Classify | ExperimentKind::Regress => self.supervised.epochs = n,
            ExperimentKind::BaSweep => {}
        }
    }

    /// Checks the blocks this experiment uses; the error names the offending key.
    fn validate(&self) -> Result<(), (&'static str, String)> {
        let msg = |e: brhier_core::Error| e.to_string();
        match self.experiment {
            ExperimentKind::BaSweep => {
                let b = &self.ba_sweep;
                if let Some(u) = &b.utility {
                    if u.is_empty() || u.iter().any(|r| r.len() != u[0].len() || r.is_empty()) {
                        return Err(("utility", "must be a non-empty rectangular table".into()));
                    }
                } else if b.n_states == 0 || b.n_actions == 0 {
                    return Err(("ba_sweep", "n_states and n_actions must be >= 1".into()));
                }
                if b.n_experts == 0 {
                    return Err(("ba_sweep", "n_experts must be >= 1".into()));
                }
                for (key, g) in [("beta1", b.beta1), ("beta2", b.beta2)] {
                    if !(g.low > 0.0 && g.high >= g.low && g.high.is_finite()) || g.points == 0 {
                        return Err((key, "grid needs 0 < low <= high < inf and points >= 1".into()));
                    }
                }
            }
            ExperimentKind::Classify => {
                self.supervised.validate().map_err(|e| ("supervised", msg(e)))?;
                if self.classify.n_samples < 4 || !(self.classify.noise >= 0.0) {
                    return Err(("classify", "n_samples must be >= 4 and noise >= 0".into()));
                }
            }
            ExperimentKind::Regress => {
                self.supervised.validate().map_err(|e| ("supervised", msg(e)))?;
                if self.regress.n_samples < 4 || !(self.regress.noise >= 0.0) {
                    return Err(("regress", "n_samples must be >= 4 and noise >= 0".into()));
                }
            }
            ExperimentKind::Plant => {
                self.shs.validate().map_err(|e| ("shs", msg(e)))?;
                self.plant.validate().map_err(|e| ("plant", msg(e)))?;
            }
            ExperimentKind::Pendulum => {
                self.shs.validate().map_err(|e| ("shs", msg(e)))?;
                self.pendulum.validate().map_err(|e| ("pendulum", msg(e)))?;
            }
        }
        if self.experiment.is_control() && self.evaluation.episodes == 0 {
            return Err(("evaluation", "episodes must be >= 1".into()));
        }
        Ok(())
    }

    /// Pretty JSON with every default spelled out.
    pub fn echo(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// The config with fields that may legitimately differ between a
    /// checkpoint and its resumption neutralized.
    fn identity(&self) -> Value {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.set_iterations(0);
        serde_json::to_value(c).expect("config serializes")
    }

    /// SHA-256 of [`ExperimentConfig::identity`].
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(&self.identity()).expect("config serializes");
        Sha256::digest(bytes).into()
    }

    /// `path: old -> new` for every leaf that differs, ignoring iterations
    /// and the output directory.
    pub fn diff(&self, other: &ExperimentConfig) -> Vec<String> {
        let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
        flatten("", &self.identity(), &mut a);
        flatten("", &other.identity(), &mut b);
        let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        keys.into_iter()
            .filter_map(|k| {
                let (x, y) = (a.get(k), b.get(k));
                (x != y).then(|| format!("{k}: {} -> {}", x.map_or("(absent)", String::as_str), y.map_or("(absent)", String::as_str)))
            })
            .collect()
    }
}

/// Recursively replaces entries of `base` by those of `top`; objects merge,
/// everything else is replaced wholesale.
fn overlay(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// One-based line of the first `"key":` in `text`.
fn locate(text: &str, key: &str) -> Option<usize> {
    let quoted = format!("\"{key}\"");
    text.lines()
        .position(|l| l.match_indices(&quoted).any(|(i, _)| l[i + quoted.len()..].trim_start().starts_with(':')))
        .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = "{\n  \"experiment\": \"plant\",\n  \"shs\": {\n    \"n_expert\": 3\n  }\n}\n";
        let err = ExperimentConfig::parse(text, "c.json").unwrap_err().to_string();
        assert!(err.starts_with("c.json:4:"), "{err}");
        assert!(err.contains("n_expert"), "{err}");
    }

    #[test]
    fn partial_block_keeps_preset_values() {
        let c = ExperimentConfig::parse(r#"{"experiment": "plant", "shs": {"iterations": 7}}"#, "c").unwrap();
        assert_eq!(c.shs.iterations, 7);
        assert_eq!(c.shs.beta2, ShsConfig::plant().beta2);
        assert!(c.shs.beta1.is_infinite());
    }

    #[test]
    fn echo_parses_back_to_the_same_config() {
        let c = ExperimentConfig::parse(r#"{"experiment": "regress", "seed": 3}"#, "c").unwrap();
        assert_eq!(c.supervised.seed, 3);
        let echo = c.echo();
        assert!(echo.contains("\"lr_selector\""));
        assert_eq!(ExperimentConfig::parse(&echo, "echo").unwrap(), c);
    }

    #[test]
    fn semantic_error_points_at_block() {
        let text = "{\n  \"experiment\": \"plant\",\n  \"plant\": {\"dt\": -1.0}\n}";
        let err = ExperimentConfig::parse(text, "c").unwrap_err().to_string();
        assert!(err.starts_with("c:3: plant:"), "{err}");
    }

    #[test]
    fn hash_ignores_iterations_and_output_dir() {
        let a = ExperimentConfig::preset(ExperimentKind::Plant);
        let mut b = a.clone();
        b.set_iterations(99);
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        assert!(a.diff(&b).is_empty());
        b.shs.lr_selector = 0.5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.diff(&b), vec![format!("shs.lr_selector: {} -> 0.5", a.shs.lr_selector)]);
    }
}
