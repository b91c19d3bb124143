//! Runs and resumes experiments, writing artifacts into the output directory:
//! `config.echo`, `metrics.csv`, `checkpoint`, plots and `summary.json`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use brhier_core::envs::{Environment, PendulumEnv, PlantEnv};
use brhier_core::prob::RngStream;
use brhier_core::shs::{train, MetricsRow, ShsState};
use brhier_core::supervised::{make_classification, make_regression, LabeledDataset, Prediction, SupervisedMetrics, SupervisedModel, Targets};
use brhier_core::tabular::{beta_sweep, geometric_grid, write_sweep_csv, DiscreteProblem};

use crate::checkpoint::{Checkpoint, TrainedState};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::CliError;
use crate::plot::{line_chart, partition_map, PartitionMap, Series};
use crate::summary;

pub const SCHEMA_LINE: &str = "# schema=1";
pub const METRICS: &str = "metrics.csv";
pub const ECHO: &str = "config.echo";
pub const CHECKPOINT: &str = "checkpoint";
pub const DATASET: &str = "dataset.csv";

/// Appends rows to `metrics.csv`, flushing each so a fault keeps what was written.
struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    fn create(dir: &Path, header: &str) -> Result<Self, CliError> {
        let path = dir.join(METRICS);
        let mut file = File::create(&path).map_err(CliError::io(format!("creating {}", path.display())))?;
        writeln!(file, "{SCHEMA_LINE}\n{header}").map_err(CliError::io(format!("writing {}", path.display())))?;
        Ok(Self { file, path })
    }

    /// Opens an existing file for appending after checking it holds exactly `rows` data rows.
    fn append(dir: &Path, header: &str, rows: u64) -> Result<Self, CliError> {
        let path = dir.join(METRICS);
        let existing = File::open(&path).map_err(CliError::io(format!("opening {}", path.display())))?;
        let mut lines = BufReader::new(existing).lines();
        let mut next = || lines.next().transpose().map_err(CliError::io(format!("reading {}", path.display())));
        if next()?.as_deref() != Some(SCHEMA_LINE) || next()?.as_deref() != Some(header) {
            return Err(CliError::Artifacts(format!("{} does not match this run's schema", path.display())));
        }
        let mut count = 0u64;
        while next()?.is_some() {
            count += 1;
        }
        if count != rows {
            return Err(CliError::Artifacts(format!("{} has {count} rows but the checkpoint is at iteration {rows}", path.display())));
        }
        let file = OpenOptions::new().append(true).open(&path).map_err(CliError::io(format!("opening {}", path.display())))?;
        Ok(Self { file, path })
    }

    fn row(&mut self, line: &str) -> Result<(), CliError> {
        writeln!(self.file, "{line}").and_then(|_| self.file.flush()).map_err(CliError::io(format!("writing {}", self.path.display())))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(CliError::io(format!("writing {}", path.display())))
}

fn metrics_header(config: &ExperimentConfig, n_experts: usize) -> String {
    match config.experiment {
        ExperimentKind::Plant | ExperimentKind::Pendulum => MetricsRow::csv_header(n_experts),
        ExperimentKind::Classify | ExperimentKind::Regress => {
            let kind = match config.experiment {
                ExperimentKind::Classify => brhier_core::supervised::TaskKind::Classification { n_classes: 2 },
                _ => brhier_core::supervised::TaskKind::Regression,
            };
            SupervisedMetrics::csv_header(n_experts, kind)
        }
        ExperimentKind::BaSweep => brhier_core::tabular::SWEEP_CSV_HEADER.to_string(),
    }
}

/// Fresh run of `config`. Artifacts written before a failure are kept.
pub fn run(config: &ExperimentConfig) -> Result<(), CliError> {
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    write_file(&dir.join(ECHO), &config.echo())?;
    match config.experiment {
        ExperimentKind::BaSweep => run_sweep(config)?,
        ExperimentKind::Plant => {
            let env = PlantEnv::new(config.plant.clone())?;
            let state = ShsState::new(config.shs.clone(), env.state_dim(), env.action_spec())?;
            continue_control(config, &env, state, config.iterations(), None)?;
        }
        ExperimentKind::Pendulum => {
            let env = PendulumEnv::new(config.pendulum.clone())?;
            let state = ShsState::new(config.shs.clone(), env.state_dim(), env.action_spec())?;
            continue_control(config, &env, state, config.iterations(), None)?;
        }
        ExperimentKind::Classify | ExperimentKind::Regress => {
            let data = dataset(config)?;
            let mut f = File::create(dir.join(DATASET)).map_err(CliError::io("creating dataset.csv"))?;
            data.write_csv(&mut f)?;
            let model = SupervisedModel::new(config.supervised.clone(), data.kind(), data.dim())?;
            continue_supervised(config, &data, model, config.iterations(), None)?;
        }
    }
    summary::write_summary(dir)?;
    Ok(())
}

/// Continues training from `checkpoint_path` for `extra` more iterations,
/// appending to the metrics of the directory holding the checkpoint.
pub fn resume(checkpoint_path: &Path, extra: usize) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let dir = checkpoint_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let echo_path = dir.join(ECHO);
    let current = ExperimentConfig::load(&echo_path)?;
    if current.hash() != ckpt.config.hash() {
        let diff = ckpt.config.diff(&current);
        return Err(CliError::Checkpoint(format!(
            "config hash mismatch between {} and {}:\n  {}",
            checkpoint_path.display(),
            echo_path.display(),
            diff.join("\n  ")
        )));
    }
    let mut config = ckpt.config.clone();
    config.output_dir = dir.clone();
    let done = ckpt.state.iteration();
    config.set_iterations(done as usize + extra);
    write_file(&echo_path, &config.echo())?;
    match (config.experiment, ckpt.state) {
        (ExperimentKind::Plant, TrainedState::Shs(mut state)) => {
            state.config.iterations = config.shs.iterations;
            let env = PlantEnv::new(config.plant.clone())?;
            continue_control(&config, &env, state, extra, Some(done))?;
        }
        (ExperimentKind::Pendulum, TrainedState::Shs(mut state)) => {
            state.config.iterations = config.shs.iterations;
            let env = PendulumEnv::new(config.pendulum.clone())?;
            continue_control(&config, &env, state, extra, Some(done))?;
        }
        (ExperimentKind::Classify | ExperimentKind::Regress, TrainedState::Supervised(mut model)) => {
            model.config.epochs = config.supervised.epochs;
            let data = dataset(&config)?;
            continue_supervised(&config, &data, model, extra, Some(done))?;
        }
        (kind, _) => return Err(CliError::Checkpoint(format!("checkpoint state does not fit a {kind:?} experiment"))),
    }
    summary::write_summary(&dir)?;
    Ok(())
}

pub fn dataset(config: &ExperimentConfig) -> Result<LabeledDataset, CliError> {
    Ok(match config.experiment {
        ExperimentKind::Classify => make_classification(config.classify.task, config.classify.n_samples, config.classify.noise, config.seed)?,
        ExperimentKind::Regress => make_regression(config.regress.n_samples, config.regress.noise, config.seed)?,
        other => return Err(CliError::Config(format!("{other:?} has no dataset"))),
    })
}

fn continue_control<E>(config: &ExperimentConfig, env: &E, mut state: ShsState, iterations: usize, resumed_at: Option<u64>) -> Result<(), CliError>
where
    E: Environment + Clone + Sync,
{
    let dir = &config.output_dir;
    let header = metrics_header(config, state.config.n_experts);
    let mut out = match resumed_at {
        Some(rows) => MetricsWriter::append(dir, &header, rows)?,
        None => MetricsWriter::create(dir, &header)?,
    };
    let mut io_error = None;
    let result = train(&mut state, env, iterations, |row| {
        out.row(&row.csv_line()).map_err(|e| {
            let msg = e.to_string();
            io_error = Some(e);
            brhier_core::Error::Environment(msg)
        })
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    result?;
    let partition = if config.experiment == ExperimentKind::Plant {
        let r = config.plant.init_range.max(0.5);
        Some(selector_curve(|s| state.selector_posterior(s), (-r, r), state.config.n_experts)?)
    } else {
        None
    };
    Checkpoint { config: config.clone(), state: TrainedState::Shs(state) }.save(&dir.join(CHECKPOINT))?;
    curves(dir, config)?;
    if let Some(svg) = partition {
        write_file(&dir.join("partition.svg"), &svg)?;
    }
    Ok(())
}

fn continue_supervised(
    config: &ExperimentConfig,
    data: &LabeledDataset,
    mut model: SupervisedModel,
    epochs: usize,
    resumed_at: Option<u64>,
) -> Result<(), CliError> {
    let dir = &config.output_dir;
    let header = metrics_header(config, model.config.n_experts);
    let mut out = match resumed_at {
        Some(rows) => MetricsWriter::append(dir, &header, rows)?,
        None => MetricsWriter::create(dir, &header)?,
    };
    for _ in 0..epochs {
        let m = model.train_epoch(data)?;
        out.row(&m.csv_line())?;
    }
    let k = model.config.n_experts;
    let (partition, fit) = match data.kind() {
        brhier_core::supervised::TaskKind::Classification { .. } => (classification_map(&model, data)?, None),
        brhier_core::supervised::TaskKind::Regression => {
            let xs: Vec<f64> = data.inputs().iter().map(|x| x[0]).collect();
            let range = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            (selector_curve(|s| model.selector_posterior(s), range, k)?, Some(regression_fit(&model, data, range)?))
        }
    };
    Checkpoint { config: config.clone(), state: TrainedState::Supervised(model) }.save(&dir.join(CHECKPOINT))?;
    curves(dir, config)?;
    write_file(&dir.join("partition.svg"), &partition)?;
    if let Some(svg) = fit {
        write_file(&dir.join("fit.svg"), &svg)?;
    }
    Ok(())
}

fn run_sweep(config: &ExperimentConfig) -> Result<(), CliError> {
    let b = &config.ba_sweep;
    let utility = match &b.utility {
        Some(u) => u.clone(),
        None => {
            let mut rng = RngStream::new(config.seed, 0);
            (0..b.n_states).map(|_| (0..b.n_actions).map(|_| rng.uniform()).collect()).collect()
        }
    };
    let problem = DiscreteProblem::uniform(utility, b.n_experts)?;
    let beta1 = geometric_grid(b.beta1.low, b.beta1.high, b.beta1.points);
    let beta2 = geometric_grid(b.beta2.low, b.beta2.high, b.beta2.points);
    let mut points = Vec::with_capacity(beta1.len() * beta2.len());
    for b1 in &beta1 {
        let grid: Vec<(f64, f64)> = beta2.iter().map(|b2| (*b1, *b2)).collect();
        points.extend(beta_sweep(&problem, &grid, &b.solver)?);
    }
    let dir = &config.output_dir;
    let mut buf = format!("{SCHEMA_LINE}\n").into_bytes();
    write_sweep_csv(&points, &mut buf).map_err(CliError::io("formatting sweep"))?;
    std::fs::write(dir.join(METRICS), buf).map_err(CliError::io("writing metrics.csv"))?;
    let series = |f: fn(&brhier_core::tabular::SweepPoint) -> f64| -> Vec<Series> {
        beta1
            .iter()
            .map(|b1| Series {
                name: format!("beta1 = {b1:.3}"),
                points: points.iter().filter(|p| p.beta1 == *b1).map(|p| (p.beta2.log10(), f(p))).collect(),
            })
            .collect()
    };
    write_file(&dir.join("utility.svg"), &line_chart("Expected utility", "log10 beta2", "E[U]", &series(|p| p.expected_utility)))?;
    write_file(&dir.join("mi.svg"), &line_chart("Selector information", "log10 beta2", "I(S;X) [bits]", &series(|p| p.mi_sx_bits)))?;
    Ok(())
}

/// Reward, information and usage curves from the metrics file.
fn curves(dir: &Path, config: &ExperimentConfig) -> Result<(), CliError> {
    let table = summary::read_metrics(dir)?;
    let col = |name: &str| -> Vec<(f64, f64)> {
        match (table.column("iter"), table.column(name)) {
            (Some(i), Some(v)) => i.iter().cloned().zip(v.iter().cloned()).collect(),
            _ => vec![],
        }
    };
    let x = if config.experiment.is_supervised() { "epoch" } else { "iteration" };
    let reward = if config.experiment.is_supervised() { "mean utility" } else { "mean episode reward" };
    write_file(&dir.join("reward.svg"), &line_chart("Reward", x, reward, &[Series { name: "reward".into(), points: col("mean_reward") }]))?;
    write_file(&dir.join("mi.svg"), &line_chart("Selector information", x, "I(S;X) [bits]", &[Series { name: "mi".into(), points: col("mi_sx_bits") }]))?;
    let usage: Vec<Series> = table
        .headers
        .iter()
        .filter(|h| h.starts_with("usage_x"))
        .map(|h| Series { name: h.trim_start_matches("usage_").to_string(), points: col(h) })
        .collect();
    write_file(&dir.join("usage.svg"), &line_chart("Expert usage p(x)", x, "p(x)", &usage))?;
    for score in ["accuracy", "mse"] {
        if table.column(score).is_some() {
            write_file(&dir.join(format!("{score}.svg")), &line_chart(score, x, score, &[Series { name: score.into(), points: col(score) }]))?;
        }
    }
    Ok(())
}

const GRID: usize = 60;

/// `pi(x|s)` along a 1-D state range, one line per expert.
fn selector_curve<F>(posterior: F, range: (f64, f64), n_experts: usize) -> Result<String, CliError>
where
    F: Fn(&[f64]) -> brhier_core::Result<brhier_core::prob::Categorical>,
{
    let mut series: Vec<Series> = (0..n_experts).map(|i| Series { name: format!("x{i}"), points: vec![] }).collect();
    for i in 0..=GRID {
        let s = range.0 + (range.1 - range.0) * i as f64 / GRID as f64;
        let p = posterior(&[s])?;
        for (x, ser) in series.iter_mut().enumerate() {
            ser.points.push((s, p.prob(x)));
        }
    }
    Ok(line_chart("Partition pi(x|s)", "s", "pi(x|s)", &series))
}

fn classification_map(model: &SupervisedModel, data: &LabeledDataset) -> Result<String, CliError> {
    let pad = 0.2;
    let bounds = |i: usize| {
        let v = data.inputs().iter().map(|x| x[i]);
        (v.clone().fold(f64::INFINITY, f64::min) - pad, v.fold(f64::NEG_INFINITY, f64::max) + pad)
    };
    let (xr, yr) = (bounds(0), bounds(1));
    let mut cells = Vec::with_capacity(GRID);
    for r in 0..GRID {
        let y = yr.0 + (yr.1 - yr.0) * (r as f64 + 0.5) / GRID as f64;
        let mut row = Vec::with_capacity(GRID);
        for c in 0..GRID {
            let x = xr.0 + (xr.1 - xr.0) * (c as f64 + 0.5) / GRID as f64;
            let p = model.selector_posterior(&[x, y])?;
            row.push((p.argmax(), p.prob(p.argmax())));
        }
        cells.push(row);
    }
    let Targets::Classes(labels) = data.targets() else { unreachable!("classification data") };
    let points = data.inputs().iter().zip(labels).map(|(x, c)| (x[0], x[1], *c)).collect();
    Ok(partition_map("Partition argmax pi(x|s)", &PartitionMap { x: xr, y: yr, cells, points }))
}

fn regression_fit(model: &SupervisedModel, data: &LabeledDataset, range: (f64, f64)) -> Result<String, CliError> {
    let Targets::Values(y) = data.targets() else { unreachable!("regression data") };
    let mut samples: Vec<(f64, f64)> = data.inputs().iter().map(|x| x[0]).zip(y.iter().cloned()).collect();
    samples.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut fit = Vec::with_capacity(GRID + 1);
    for i in 0..=GRID {
        let s = range.0 + (range.1 - range.0) * i as f64 / GRID as f64;
        if let Prediction::Value(v) = model.predict(&[s])? {
            fit.push((s, v));
        }
    }
    Ok(line_chart("Mixture fit", "s", "y", &[Series { name: "data".into(), points: samples }, Series { name: "mixture mean".into(), points: fit }]))
}
