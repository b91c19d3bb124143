//! Post-run report: reads the artifacts back, evaluates the greedy policy
//! for control runs and checks the configured thresholds.

use std::path::Path;

use brhier_core::envs::{evaluate_policy, lqr_oracle, PendulumEnv, PlantEnv, PlantSpec};
use brhier_core::nn::Action;
use brhier_core::shs::ShsState;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, TrainedState};
use crate::config::{ExperimentConfig, ExperimentKind, Thresholds};
use crate::error::CliError;
use crate::runner::{CHECKPOINT, ECHO, METRICS, SCHEMA_LINE};

pub const SUMMARY: &str = "summary.json";

pub struct MetricsTable {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.headers.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    fn last(&self, name: &str) -> Option<f64> {
        self.column(name).and_then(|c| c.last().copied())
    }
}

pub fn read_metrics(dir: &Path) -> Result<MetricsTable, CliError> {
    let path = dir.join(METRICS);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Artifacts(format!("{}: {e}", path.display())))?;
    if text.lines().next() != Some(SCHEMA_LINE) {
        return Err(CliError::Artifacts(format!("{}: missing `{SCHEMA_LINE}` line", path.display())));
    }
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers: Vec<String> = reader.headers().map_err(|e| CliError::Artifacts(format!("{}: {e}", path.display())))?.iter().map(String::from).collect();
    let mut rows = vec![];
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Artifacts(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|v| match v {
                "true" => Ok(1.0),
                "false" => Ok(0.0),
                _ => v.parse::<f64>(),
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::Artifacts(format!("{}: row {} is not numeric", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(MetricsTable { headers, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: ExperimentKind,
    pub rows: usize,
    pub final_mean_reward: Option<f64>,
    pub final_mi_bits: Option<f64>,
    pub usage: Vec<f64>,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    /// Mean episode reward of the greedy policy (argmax selector, expert mean).
    pub greedy_reward: Option<f64>,
    /// Plant only: learned `K` for regimes `x >= 0` and `x < 0`, with `u = -K x`.
    pub gains: Option<[f64; 2]>,
    pub riccati_gains: Option<[f64; 2]>,
    /// Switched Riccati controller on the same evaluation episodes.
    pub lqr_reward: Option<f64>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Learned gains on the plant, assigning each regime the expert the selector
/// prefers at a probe state inside it.
pub fn plant_gains(state: &ShsState, spec: &PlantSpec) -> Result<[f64; 2], CliError> {
    let probe = 0.25 * spec.init_range.max(0.4);
    let mut gains = [0.0; 2];
    for (regime, x) in [probe, -probe].into_iter().enumerate() {
        let expert = state.selector_posterior(&[x])?.argmax();
        let w = state.experts[expert].model.params().group("w0").map(|w| w[0]).ok_or_else(|| CliError::Artifacts("expert has no w0 group".into()))?;
        gains[regime] = -w;
    }
    Ok(gains)
}

pub fn summarize(dir: &Path) -> Result<Summary, CliError> {
    let config = ExperimentConfig::load(&dir.join(ECHO)).map_err(|e| CliError::Artifacts(format!("cannot read {ECHO}: {e}")))?;
    let table = read_metrics(dir)?;
    if table.rows.is_empty() {
        return Err(CliError::Artifacts(format!("{} has no rows", dir.join(METRICS).display())));
    }
    let usage: Vec<f64> = table.headers.iter().filter(|h| h.starts_with("usage_x")).filter_map(|h| table.last(h)).collect();
    let mut s = Summary {
        experiment: config.experiment,
        rows: table.rows.len(),
        final_mean_reward: table.last("mean_reward").or_else(|| table.last("expected_utility")),
        final_mi_bits: table.last("mi_sx_bits"),
        usage,
        accuracy: table.last("accuracy"),
        mse: table.last("mse"),
        greedy_reward: None,
        gains: None,
        riccati_gains: None,
        lqr_reward: None,
        checks: vec![],
        pass: true,
    };
    if config.experiment.is_control() {
        let ckpt = Checkpoint::load(&dir.join(CHECKPOINT))?;
        let TrainedState::Shs(state) = &ckpt.state else {
            return Err(CliError::Artifacts("checkpoint does not hold a control policy".into()));
        };
        let (episodes, seed) = (config.evaluation.episodes, config.evaluation.seed);
        let greedy = |st: &[f64], _: &mut _| state.greedy_action(st);
        if config.experiment == ExperimentKind::Plant {
            let mut env = PlantEnv::new(config.plant.clone())?;
            s.greedy_reward = Some(evaluate_policy(&mut env, greedy, episodes, seed)?.mean_reward);
            let oracle = lqr_oracle(&config.plant)?;
            let k = oracle.gains;
            let lqr = evaluate_policy(&mut env, |st, _| Ok(Action::Continuous(vec![-k[PlantSpec::regime(st[0])] * st[0]])), episodes, seed)?;
            s.lqr_reward = Some(lqr.mean_reward);
            s.riccati_gains = Some(k);
            s.gains = Some(plant_gains(state, &config.plant)?);
        } else {
            let mut env = PendulumEnv::new(config.pendulum.clone())?;
            s.greedy_reward = Some(evaluate_policy(&mut env, greedy, episodes, seed)?.mean_reward);
        }
    }
    s.checks = checks(&s, &config.thresholds);
    s.pass = s.checks.iter().all(|c| c.pass);
    Ok(s)
}

fn checks(s: &Summary, t: &Thresholds) -> Vec<Check> {
    let mut out = vec![];
    let mut check = |name: &str, value: Option<f64>, bound: String, ok: &dyn Fn(f64) -> bool| {
        // a configured bound without a value to test fails
        let v = value.unwrap_or(f64::NAN);
        out.push(Check { name: name.into(), value: v, bound, pass: !v.is_nan() && ok(v) });
    };
    if let Some(b) = t.min_mean_reward {
        let reward = s.greedy_reward.or(s.final_mean_reward);
        check("mean_reward", reward, format!(">= {b}"), &|v| v >= b);
    }
    if let Some(b) = t.min_mi_bits {
        check("mi_sx_bits", s.final_mi_bits, format!(">= {b}"), &|v| v >= b);
    }
    if let Some([lo, hi]) = t.usage_range {
        for (i, u) in s.usage.iter().enumerate() {
            check(&format!("usage_x{i}"), Some(*u), format!("in [{lo}, {hi}]"), &|v| (lo..=hi).contains(&v));
        }
    }
    if let Some(b) = t.min_accuracy {
        check("accuracy", s.accuracy, format!(">= {b}"), &|v| v >= b);
    }
    if let Some(b) = t.max_mse {
        check("mse", s.mse, format!("<= {b}"), &|v| v <= b);
    }
    if let Some(b) = t.max_gain_error {
        for i in 0..2 {
            let err = s.gains.zip(s.riccati_gains).map(|(g, k)| (g[i] - k[i]).abs() / k[i].abs());
            check(&format!("gain_error_{i}"), err, format!("<= {b}"), &|v| v <= b);
        }
    }
    if let Some(b) = t.max_reward_gap {
        let gap = s.greedy_reward.zip(s.lqr_reward).map(|(g, l)| (l - g) / l.abs());
        check("reward_gap_vs_lqr", gap, format!("<= {b}"), &|v| v <= b);
    }
    out
}

pub fn write_summary(dir: &Path) -> Result<Summary, CliError> {
    let s = summarize(dir)?;
    let json = serde_json::to_string_pretty(&s).expect("summary serializes") + "\n";
    std::fs::write(dir.join(SUMMARY), json).map_err(CliError::io("writing summary.json"))?;
    Ok(s)
}

pub fn report(s: &Summary) -> String {
    let mut out = format!("experiment: {:?} ({} metric rows)\n", s.experiment, s.rows);
    let mut line = |k: &str, v: String| out.push_str(&format!("  {k:<18} {v}\n"));
    if let Some(v) = s.final_mean_reward {
        line("final mean reward", format!("{v:.4}"));
    }
    if let Some(v) = s.greedy_reward {
        line("greedy reward", format!("{v:.4}"));
    }
    if let Some(v) = s.lqr_reward {
        line("switched LQR", format!("{v:.4}"));
    }
    if let Some(v) = s.final_mi_bits {
        line("I(S;X)", format!("{v:.4} bits"));
    }
    if !s.usage.is_empty() {
        let u: Vec<String> = s.usage.iter().map(|u| format!("{u:.3}")).collect();
        line("usage p(x)", format!("[{}]", u.join(", ")));
    }
    if let Some(g) = s.gains {
        line("gains K", format!("{:.3} (x >= 0), {:.3} (x < 0)", g[0], g[1]));
    }
    if let Some(g) = s.riccati_gains {
        line("Riccati gains", format!("{:.3}, {:.3}", g[0], g[1]));
    }
    if let Some(v) = s.accuracy {
        line("accuracy", format!("{v:.4}"));
    }
    if let Some(v) = s.mse {
        line("mse", format!("{v:.5}"));
    }
    for c in &s.checks {
        out.push_str(&format!("  [{}] {} = {:.4} (want {})\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.bound));
    }
    if s.checks.is_empty() {
        out.push_str("  no thresholds configured\n");
    }
    out
}
