//! The one-step (bandit) variant of the learner for classification and
//! regression: utilities are negative losses, the selector is trained with
//! `beta1 = inf`, experts are linear, and every sample is a one-step episode.
//! Also the synthetic datasets used to exercise it.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{Action, Activation, Direction, Head, HeadGrad, HeadOutput, MlpSpec, Model, OptimizerConfig, OptimizerKind};
use crate::prob::{entropy, kl_categorical, kl_gaussian, mi_estimate_from_samples, Categorical, RngStream, VARIANCE_FLOOR};
use crate::shs::{beta_serde, penalty, ActionDist, Learner, MetricsRow, PriorState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    Classification { n_classes: usize },
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    inputs: Vec<Vec<f64>>,
    targets: Targets,
    kind: TaskKind,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Targets, kind: TaskKind) -> Result<Self> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::contract("dataset must contain at least one sample"));
        }
        let d = inputs[0].len();
        if d == 0 {
            return Err(Error::contract("inputs must have at least one feature"));
        }
        for x in &inputs {
            check_dim(d, x.len())?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract("non-finite input"));
            }
        }
        match (&targets, kind) {
            (Targets::Classes(y), TaskKind::Classification { n_classes }) => {
                check_dim(n, y.len())?;
                if n_classes < 2 {
                    return Err(Error::contract("classification needs at least two classes"));
                }
                if let Some(bad) = y.iter().find(|c| **c >= n_classes) {
                    return Err(Error::contract(format!("class {bad} outside 0..{n_classes}")));
                }
            }
            (Targets::Values(y), TaskKind::Regression) => {
                check_dim(n, y.len())?;
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::contract("non-finite regression target"));
                }
            }
            _ => return Err(Error::contract("targets do not match the task kind")),
        }
        Ok(Self { inputs, targets, kind })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn label(&self, i: usize) -> Label {
        match &self.targets {
            Targets::Classes(y) => Label::Class(y[i]),
            Targets::Values(y) => Label::Value(y[i]),
        }
    }

    /// CSV with header `x0,..,x{d-1},label`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(io_error)?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.inputs[i].iter().map(|v| v.to_string()).collect();
            row.push(match self.label(i) {
                Label::Class(c) => c.to_string(),
                Label::Value(v) => v.to_string(),
            });
            w.write_record(&row).map_err(io_error)?;
        }
        w.flush().map_err(|e| Error::contract(format!("csv write failed: {e}")))
    }

    /// Reads the format of [`LabeledDataset::write_csv`]; labels are parsed
    /// according to `kind`.
    pub fn read_csv<R: Read>(reader: R, kind: TaskKind) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(io_error)?.clone();
        let d = header.len().checked_sub(1).filter(|d| *d > 0).ok_or_else(|| Error::contract("csv needs x columns and a label"))?;
        for (i, name) in header.iter().enumerate() {
            let want = if i < d { format!("x{i}") } else { "label".to_string() };
            if name != want {
                return Err(Error::contract(format!("csv header column {i} is {name:?}, expected {want:?}")));
            }
        }
        let mut inputs = vec![];
        let (mut classes, mut values) = (vec![], vec![]);
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(io_error)?;
            let row = line + 2;
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::contract(format!("csv line {row}: {s:?} is not a number")));
            let x = (0..d).map(|i| parse(&record[i])).collect::<Result<Vec<_>>>()?;
            inputs.push(x);
            let label = &record[d];
            match kind {
                TaskKind::Classification { .. } => classes.push(
                    label.trim().parse::<usize>().map_err(|_| Error::contract(format!("csv line {row}: {label:?} is not a class index")))?,
                ),
                TaskKind::Regression => values.push(parse(label)?),
            }
        }
        let targets = match kind {
            TaskKind::Classification { .. } => Targets::Classes(classes),
            TaskKind::Regression => Targets::Values(values),
        };
        Self::new(inputs, targets, kind)
    }
}

fn io_error(e: csv::Error) -> Error {
    Error::contract(format!("csv: {e}"))
}

/// What an expert predicts for one input.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Classes(Categorical),
    Value(f64),
}

/// Cross-entropy `-log p(y)` or squared error `(y_hat - y)^2`.
pub fn loss(prediction: &Prediction, label: Label) -> Result<f64> {
    match (prediction, label) {
        (Prediction::Classes(p), Label::Class(c)) if c < p.len() => Ok(-p.log_prob(c)),
        (Prediction::Value(v), Label::Value(y)) => Ok((v - y) * (v - y)),
        _ => Err(Error::contract("prediction does not match label")),
    }
}

pub fn utility(prediction: &Prediction, label: Label) -> Result<f64> {
    loss(prediction, label).map(|l| -l)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationTask {
    XorBlobs,
    ConcentricCircles,
    Moons,
}

/// Circles task: class 0 is split between a filled disc and an outer
/// circle, class 1 is the circle between them. With only two regions a
/// single line cutting off an outer cap scores about 0.65.
const CIRCLE_DISC: f64 = 0.5;
const CIRCLE_MIDDLE: f64 = 1.0;
const CIRCLE_OUTER: f64 = 1.5;
/// The two interleaved moons are centred at `-MOON_OFFSET` and their point
/// reflection at `+MOON_OFFSET`.
const MOON_OFFSET: [f64; 2] = [1.75, 0.0];

/// Balanced two-class datasets in the plane. `noise` is the standard
/// deviation of isotropic Gaussian jitter added to every point.
pub fn make_classification(task: ClassificationTask, n: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 4 {
        return Err(Error::contract("n must be >= 4"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::contract("noise must be finite and non-negative"));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let mut p = match task {
            ClassificationTask::XorBlobs => {
                // clusters at (±1, ±1); class 0 where the signs agree
                let s = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
                let t = if class == 0 { s } else { -s };
                [s, t]
            }
            ClassificationTask::ConcentricCircles => {
                let angle = rng.uniform_range(-PI, PI);
                let r = if class == 1 {
                    CIRCLE_MIDDLE
                } else if rng.uniform() < 0.5 {
                    // uniform by area
                    CIRCLE_DISC * rng.uniform().sqrt()
                } else {
                    CIRCLE_OUTER
                };
                [r * angle.cos(), r * angle.sin()]
            }
            ClassificationTask::Moons => {
                let t = rng.uniform_range(0.0, PI);
                let local = if class == 0 { [t.cos(), t.sin()] } else { [1.0 - t.cos(), 0.5 - t.sin()] };
                // centre the pair, then place it or its mirror image
                let centred = [local[0] - 0.5, local[1] - 0.25];
                if rng.uniform() < 0.5 {
                    [centred[0] - MOON_OFFSET[0], centred[1] - MOON_OFFSET[1]]
                } else {
                    [MOON_OFFSET[0] - centred[0], MOON_OFFSET[1] - centred[1]]
                }
            }
        };
        for v in p.iter_mut() {
            *v += noise * rng.normal();
        }
        inputs.push(p.to_vec());
        labels.push(class);
    }
    LabeledDataset::new(inputs, Targets::Classes(labels), TaskKind::Classification { n_classes: 2 })
}

/// Knots of the piecewise-linear regression target on `[-3, 3]`.
pub const REGRESSION_KNOTS: [(f64, f64); 5] = [(-3.0, -1.0), (-1.5, 2.0), (0.0, -1.0), (1.5, 2.0), (3.0, -1.0)];
pub const REGRESSION_NOISE: f64 = 0.05;

/// The noise-free regression target: linear interpolation between
/// [`REGRESSION_KNOTS`], extended linearly beyond the ends.
pub fn regression_target(x: f64) -> f64 {
    let k = &REGRESSION_KNOTS;
    let seg = k.windows(2).position(|w| x <= w[1].0).unwrap_or(k.len() - 2);
    let ((x0, y0), (x1, y1)) = (k[seg], k[seg + 1]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Inputs uniform on `[-3, 3]`, targets from [`regression_target`] plus
/// Gaussian noise of standard deviation `noise`.
pub fn make_regression(n: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 4 {
        return Err(Error::contract("n must be >= 4"));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::contract("noise must be finite and non-negative"));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.uniform_range(-3.0, 3.0);
        inputs.push(vec![x]);
        targets.push(regression_target(x) + noise * rng.normal());
    }
    LabeledDataset::new(inputs, Targets::Values(targets), TaskKind::Regression)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    pub n_experts: usize,
    #[serde(with = "beta_serde")]
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_selector: f64,
    pub lr_experts: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub selector_hidden: Vec<usize>,
    pub activation: Activation,
    /// Initial log standard deviation of regression experts.
    pub expert_init_log_std: f64,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            beta2: 10.0,
            epochs: 600,
            batch_size: 64,
            lr_selector: 1e-2,
            lr_experts: 3e-2,
            lambda1: 0.99,
            lambda2: 0.99,
            optimizer: OptimizerKind::Adam,
            clip_norm: 5.0,
            selector_hidden: vec![32, 32],
            activation: Activation::Tanh,
            expert_init_log_std: 0.0,
            seed: 0,
        }
    }
}

impl SupervisedConfig {
    /// Settings for the piecewise-linear regression task. A faster selector
    /// or a stronger expert penalty tends to leave one expert spanning two
    /// segments.
    pub fn regression() -> Self {
        Self { beta2: 100.0, epochs: 300, lr_selector: 3e-3, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("invalid config: {m}")));
        if self.n_experts == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("n_experts, epochs and batch_size must be >= 1");
        }
        if !(self.beta2 > 0.0) {
            return bad("beta2 must be positive");
        }
        if !(0.0..1.0).contains(&self.lambda1) || !(0.0..1.0).contains(&self.lambda2) {
            return bad("lambda1 and lambda2 must lie in [0, 1)");
        }
        if [self.lr_selector, self.lr_experts, self.clip_norm].iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad("learning rates and clip_norm must be positive");
        }
        if self.selector_hidden.contains(&0) {
            return bad("hidden widths must be >= 1");
        }
        if !self.expert_init_log_std.is_finite() {
            return bad("expert_init_log_std must be finite");
        }
        Ok(())
    }

    fn optimizer(&self, lr: f64) -> OptimizerConfig {
        OptimizerConfig { kind: self.optimizer, learning_rate: lr, clip_norm: Some(self.clip_norm), ..Default::default() }
    }
}

/// Per-epoch diagnostics: the engine's metric columns plus accuracy or MSE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedMetrics {
    /// `mean_reward` holds the mean utility of the sampled experts.
    pub row: MetricsRow,
    pub score: f64,
}

impl SupervisedMetrics {
    pub fn score_name(kind: TaskKind) -> &'static str {
        match kind {
            TaskKind::Classification { .. } => "accuracy",
            TaskKind::Regression => "mse",
        }
    }

    pub fn csv_header(n_experts: usize, kind: TaskKind) -> String {
        format!("{},{}", MetricsRow::csv_header(n_experts), Self::score_name(kind))
    }

    pub fn csv_line(&self) -> String {
        format!("{},{}", self.row.csv_line(), self.score)
    }
}

/// A selector over linear experts trained on a labeled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedModel {
    pub config: SupervisedConfig,
    pub kind: TaskKind,
    pub input_dim: usize,
    pub selector: Option<Learner>,
    pub experts: Vec<Learner>,
    pub priors: PriorState,
    pub epoch: u64,
}

/// Free energy of one expert on one sample and its gradient with respect to
/// the expert's head.
struct ExpertTerm {
    utility: f64,
    kl: f64,
    grad: HeadGrad,
}

impl SupervisedModel {
    pub fn new(config: SupervisedConfig, kind: TaskKind, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::contract("input_dim must be >= 1"));
        }
        let mut rng = RngStream::new(config.seed, 1);
        let selector = if config.n_experts > 1 {
            let spec = MlpSpec { input_dim, output_dim: config.n_experts, hidden: config.selector_hidden.clone(), activation: config.activation };
            Some(Learner::new(Model::new(spec, Head::Softmax, &mut rng)?, config.optimizer(config.lr_selector)))
        } else {
            None
        };
        let (out, head, prior) = match kind {
            TaskKind::Classification { n_classes } => (n_classes, Head::Softmax, ActionDist::Categorical(Categorical::uniform(n_classes))),
            TaskKind::Regression => {
                let var = (2.0 * config.expert_init_log_std).exp();
                (
                    1,
                    Head::Gaussian { init_log_std: config.expert_init_log_std },
                    ActionDist::Gaussian(crate::prob::DiagonalGaussian::new(vec![0.0], vec![var])?),
                )
            }
        };
        let spec = MlpSpec { input_dim, output_dim: out, hidden: vec![], activation: config.activation };
        let experts = (0..config.n_experts)
            .map(|_| Ok(Learner::new(Model::new(spec.clone(), head, &mut rng)?, config.optimizer(config.lr_experts))))
            .collect::<Result<Vec<_>>>()?;
        let priors = PriorState { selector: Categorical::uniform(config.n_experts), experts: vec![prior; config.n_experts] };
        Ok(Self { config, kind, input_dim, selector, experts, priors, epoch: 0 })
    }

    pub fn selector_posterior(&self, input: &[f64]) -> Result<Categorical> {
        check_dim(self.input_dim, input.len())?;
        match &self.selector {
            Some(sel) => Ok(sel.model.forward(input)?.0.categorical().expect("softmax head").clone()),
            None => Ok(Categorical::one_hot(1, 0)),
        }
    }

    pub fn expert_posterior(&self, expert: usize, input: &[f64]) -> Result<ActionDist> {
        let e = self.experts.get(expert).ok_or_else(|| Error::contract(format!("no expert {expert}")))?;
        ActionDist::from_head(e.model.forward(input)?.0)
    }

    /// Prediction of one expert: its class distribution, or its mean.
    pub fn expert_prediction(&self, expert: usize, input: &[f64]) -> Result<Prediction> {
        Ok(match self.expert_posterior(expert, input)? {
            ActionDist::Categorical(c) => Prediction::Classes(c),
            ActionDist::Gaussian(g) => Prediction::Value(g.mean()[0]),
        })
    }

    /// Mixture `sum_x pi(x|s) pi(y|s,x)` for classification, mixture mean for regression.
    pub fn predict(&self, input: &[f64]) -> Result<Prediction> {
        let sel = self.selector_posterior(input)?;
        match self.kind {
            TaskKind::Classification { n_classes } => {
                let mut mix = vec![0.0; n_classes];
                for (x, w) in sel.probs().iter().enumerate() {
                    if let Prediction::Classes(c) = self.expert_prediction(x, input)? {
                        for (m, p) in mix.iter_mut().zip(c.probs()) {
                            *m += w * p;
                        }
                    }
                }
                Ok(Prediction::Classes(Categorical::from_weights(mix)?))
            }
            TaskKind::Regression => {
                let mut mean = 0.0;
                for (x, w) in sel.probs().iter().enumerate() {
                    if let Prediction::Value(v) = self.expert_prediction(x, input)? {
                        mean += w * v;
                    }
                }
                Ok(Prediction::Value(mean))
            }
        }
    }

    /// Accuracy of the mixture argmax, or mean squared error of the mixture mean.
    pub fn evaluate(&self, data: &LabeledDataset) -> Result<f64> {
        self.check_data(data)?;
        let mut total = 0.0;
        for (i, x) in data.inputs().iter().enumerate() {
            total += match (self.predict(x)?, data.label(i)) {
                (Prediction::Classes(p), Label::Class(c)) => (p.argmax() == c) as u8 as f64,
                (pred @ Prediction::Value(_), label) => loss(&pred, label)?,
                _ => return Err(Error::contract("prediction does not match label")),
            };
        }
        Ok(total / data.len() as f64)
    }

    fn check_data(&self, data: &LabeledDataset) -> Result<()> {
        if data.kind() != self.kind {
            return Err(Error::contract("dataset task kind does not match the model"));
        }
        check_dim(self.input_dim, data.dim())
    }

    /// Utility, KL to the expert prior and the gradient of
    /// `utility - KL / beta2` with respect to the head, in closed form:
    /// the expectation over the expert's output distribution is exact.
    fn expert_term(&self, expert: usize, out: &HeadOutput, label: Label) -> Result<ExpertTerm> {
        let k = penalty(self.config.beta2);
        match (out, &self.priors.experts[expert], label) {
            (HeadOutput::Categorical(p), ActionDist::Categorical(q), Label::Class(c)) => {
                let kl = kl_categorical(p, q)?;
                let mut grad: Vec<f64> = p.probs().iter().map(|v| -v).collect();
                grad[c] += 1.0;
                if k > 0.0 {
                    // d KL / d z_j = p_j (log(p_j / q_j) - KL)
                    for (j, g) in grad.iter_mut().enumerate() {
                        let pj = p.prob(j);
                        if pj > 0.0 {
                            *g -= k * pj * (p.log_prob(j) - q.log_prob(j) - kl);
                        }
                    }
                }
                Ok(ExpertTerm { utility: p.log_prob(c), kl, grad: HeadGrad { d_out: grad, d_log_std: None } })
            }
            (HeadOutput::Gaussian(g), ActionDist::Gaussian(q), Label::Value(y)) => {
                let (mu, var) = (g.mean()[0], g.variance()[0]);
                let (m, v) = (q.mean()[0], q.variance()[0]);
                let kl = kl_gaussian(g, q)?;
                // E[(a - y)^2] under N(mu, var)
                let utility = -((mu - y) * (mu - y) + var);
                let d_mu = -2.0 * (mu - y) - k * (mu - m) / v;
                let at_floor = var <= VARIANCE_FLOOR;
                let d_ls = if at_floor { 0.0 } else { -2.0 * var - k * (var / v - 1.0) };
                Ok(ExpertTerm { utility, kl, grad: HeadGrad { d_out: vec![d_mu], d_log_std: Some(vec![d_ls]) } })
            }
            _ => Err(Error::contract("expert head, prior and label disagree")),
        }
    }

    /// One mini-batch: sample an expert per input, take a score-function step
    /// on the selector with batch-normalized free energies, then step every
    /// expert on the inputs assigned to it, then move the priors.
    pub fn train_batch(&mut self, data: &LabeledDataset, indices: &[usize], rng: &mut RngStream) -> Result<BatchStats> {
        if indices.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let n_experts = self.experts.len();
        let mut assigned = Vec::with_capacity(indices.len());
        let mut posteriors = Vec::with_capacity(indices.len());
        let mut free_energies = Vec::with_capacity(indices.len());
        let mut expert_grads: Vec<_> = self.experts.iter().map(|e| e.model.zero_grad()).collect();
        let mut counts = vec![0usize; n_experts];
        let mut stats = BatchStats::default();
        let mut expert_posts: Vec<Vec<ActionDist>> = vec![vec![]; n_experts];
        for &i in indices {
            let input = &data.inputs()[i];
            let sel = self.selector_posterior(input)?;
            let x = if self.selector.is_some() { sel.sample(rng) } else { 0 };
            let model = &self.experts[x].model;
            let (out, cache) = model.forward(input)?;
            let term = self.expert_term(x, &out, data.label(i))?;
            let f = term.utility - penalty(self.config.beta2) * term.kl;
            model.backward(&cache, &term.grad, &mut expert_grads[x])?;
            counts[x] += 1;
            stats.utility += term.utility;
            stats.free_energy += f;
            stats.expert_kl += term.kl;
            expert_posts[x].push(ActionDist::from_head(out)?);
            assigned.push(x);
            posteriors.push(sel);
            free_energies.push(f);
        }
        let n = indices.len() as f64;
        stats.utility /= n;
        stats.free_energy /= n;
        stats.expert_kl /= n;

        if let Some(sel) = &self.selector {
            let weights = normalized(&free_energies);
            let mut g = sel.model.zero_grad();
            for ((&i, &x), w) in indices.iter().zip(&assigned).zip(&weights) {
                if *w == 0.0 {
                    continue;
                }
                let (out, cache) = sel.model.forward(&data.inputs()[i])?;
                let (_, hg) = crate::nn::log_prob_and_grad(&out, &Action::Discrete(x))?;
                sel.model.backward(&cache, &hg.scaled(w / n), &mut g)?;
            }
            self.selector.as_mut().expect("selector").step(&g, Direction::Ascend)?;
        }
        for ((e, mut g), c) in self.experts.iter_mut().zip(expert_grads).zip(&counts) {
            if *c > 0 {
                g.scale(1.0 / *c as f64);
                e.step(&g, Direction::Ascend)?;
            }
        }

        if self.selector.is_some() {
            let mean = Categorical::average(posteriors.iter())?;
            self.priors.selector = self.priors.selector.mix(&mean, self.config.lambda2)?;
        }
        for (x, posts) in expert_posts.iter().enumerate() {
            let refs: Vec<&ActionDist> = posts.iter().collect();
            self.priors.experts[x] = self.priors.experts[x].ema_toward(&refs, self.config.lambda1)?;
        }
        Ok(stats)
    }

    /// Selector diagnostics over a whole dataset.
    fn selector_metrics(&self, data: &LabeledDataset) -> Result<(f64, f64, f64)> {
        if self.selector.is_none() {
            return Ok((0.0, 0.0, 0.0));
        }
        let posts = data.inputs().iter().map(|x| self.selector_posterior(x)).collect::<Result<Vec<_>>>()?;
        let marginal = Categorical::average(posts.iter())?;
        let mi = mi_estimate_from_samples(posts.iter(), &marginal)?;
        let n = posts.len() as f64;
        let (mut kl, mut ent) = (0.0, 0.0);
        for p in &posts {
            kl += kl_categorical(p, &self.priors.selector)? / n;
            ent += entropy(p) / n;
        }
        Ok((mi, kl, ent))
    }

    /// One pass over `data` in a seeded random order, then metrics on the full dataset.
    pub fn train_epoch(&mut self, data: &LabeledDataset) -> Result<SupervisedMetrics> {
        self.check_data(data)?;
        let mut rng = RngStream::new(self.config.seed, 2).fork(self.epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        let mut totals = BatchStats::default();
        for chunk in order.chunks(self.config.batch_size) {
            let s = self.train_batch(data, chunk, &mut rng)?;
            let w = chunk.len() as f64 / data.len() as f64;
            totals.utility += w * s.utility;
            totals.free_energy += w * s.free_energy;
            totals.expert_kl += w * s.expert_kl;
        }
        let (mi, sel_kl, ent) = self.selector_metrics(data)?;
        let row = MetricsRow {
            iter: self.epoch,
            mean_reward: totals.utility,
            mean_free_energy: totals.free_energy,
            mi_sx_bits: mi,
            selector_kl_nats: sel_kl,
            expert_kl_nats: totals.expert_kl,
            entropy_selector_nats: ent,
            usage: self.priors.selector.probs().to_vec(),
        };
        let score = self.evaluate(data)?;
        self.epoch += 1;
        Ok(SupervisedMetrics { row, score })
    }
}

/// Batch means of the sampled experts' utility, free energy and KL.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub utility: f64,
    pub free_energy: f64,
    pub expert_kl: f64,
}

fn normalized(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.len() < 2 {
        return values.to_vec();
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt() + 1e-8;
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Builds a model for `data` and trains it for `config.epochs` epochs,
/// handing each epoch's metrics to `sink`.
pub fn train_supervised<F>(data: &LabeledDataset, config: SupervisedConfig, mut sink: F) -> Result<SupervisedModel>
where
    F: FnMut(&SupervisedMetrics) -> Result<()>,
{
    let mut model = SupervisedModel::new(config, data.kind(), data.dim())?;
    for _ in 0..model.config.epochs {
        let m = model.train_epoch(data)?;
        sink(&m)?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let sure = Prediction::Classes(Categorical::one_hot(3, 2));
        assert_eq!(loss(&sure, Label::Class(2)).unwrap(), 0.0);
        let uniform = Prediction::Classes(Categorical::uniform(2));
        assert!((loss(&uniform, Label::Class(0)).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert_eq!(loss(&Prediction::Value(3.0), Label::Value(1.0)).unwrap(), 4.0);
        assert!(loss(&Prediction::Value(3.0), Label::Class(1)).is_err());
    }

    #[test]
    fn utility_is_negative_loss() {
        let p = Prediction::Classes(Categorical::new(vec![0.2, 0.8]).unwrap());
        for c in 0..2 {
            assert_eq!(utility(&p, Label::Class(c)).unwrap() + loss(&p, Label::Class(c)).unwrap(), 0.0);
        }
    }

    #[test]
    fn xor_without_noise_sits_on_corners() {
        let d = make_classification(ClassificationTask::XorBlobs, 40, 0.0, 3).unwrap();
        for (i, x) in d.inputs().iter().enumerate() {
            assert_eq!(x[0].abs(), 1.0);
            assert_eq!(x[1].abs(), 1.0);
            let want = if x[0] == x[1] { 0 } else { 1 };
            assert_eq!(d.label(i), Label::Class(want));
        }
    }

    #[test]
    fn generators_are_balanced_and_seeded() {
        for task in [ClassificationTask::XorBlobs, ClassificationTask::ConcentricCircles, ClassificationTask::Moons] {
            let a = make_classification(task, 101, 0.1, 9).unwrap();
            assert_eq!(a, make_classification(task, 101, 0.1, 9).unwrap());
            assert_ne!(a, make_classification(task, 101, 0.1, 10).unwrap());
            let Targets::Classes(y) = a.targets() else { panic!() };
            let ones = y.iter().filter(|c| **c == 1).count();
            assert!((ones as i64 - (101 - ones) as i64).abs() <= 1);
        }
    }

    #[test]
    fn regression_target_is_on_segment_lines() {
        let d = make_regression(200, 0.0, 1).unwrap();
        let Targets::Values(y) = d.targets() else { panic!() };
        for (x, y) in d.inputs().iter().zip(y) {
            let seg = REGRESSION_KNOTS.windows(2).find(|w| x[0] >= w[0].0 && x[0] <= w[1].0).unwrap();
            let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
            assert!((y - (y0 + (y1 - y0) * (x[0] - x0) / (x1 - x0))).abs() < 1e-12);
        }
        assert_eq!(regression_target(-1.5), 2.0);
        assert_eq!(regression_target(0.0), -1.0);
    }

    #[test]
    fn dataset_validation() {
        let kind = TaskKind::Classification { n_classes: 2 };
        assert!(LabeledDataset::new(vec![], Targets::Classes(vec![]), kind).is_err());
        assert!(LabeledDataset::new(vec![vec![0.0]], Targets::Classes(vec![2]), kind).is_err());
        assert!(LabeledDataset::new(vec![vec![0.0]], Targets::Values(vec![1.0]), kind).is_err());
        assert!(LabeledDataset::new(vec![vec![0.0], vec![1.0, 2.0]], Targets::Classes(vec![0, 1]), kind).is_err());
        assert!(make_classification(ClassificationTask::Moons, 3, 0.1, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let d = make_regression(10, 0.05, 4).unwrap();
        let mut buf = vec![];
        d.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("x0,label\n"));
        assert_eq!(LabeledDataset::read_csv(buf.as_slice(), TaskKind::Regression).unwrap(), d);

        let err = LabeledDataset::read_csv("x0,label\n1.0,0\nfoo,1\n".as_bytes(), TaskKind::Classification { n_classes: 2 }).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(LabeledDataset::read_csv("a,label\n1,0\n".as_bytes(), TaskKind::Regression).is_err());
    }

    fn fd_check(model: &mut SupervisedModel, expert: usize, input: &[f64], label: Label) {
        let k = penalty(model.config.beta2);
        let objective = |m: &SupervisedModel| {
            let (out, _) = m.experts[expert].model.forward(input).unwrap();
            let t = m.expert_term(expert, &out, label).unwrap();
            t.utility - k * t.kl
        };
        let (out, cache) = model.experts[expert].model.forward(input).unwrap();
        let term = model.expert_term(expert, &out, label).unwrap();
        let mut g = model.experts[expert].model.zero_grad();
        model.experts[expert].model.backward(&cache, &term.grad, &mut g).unwrap();
        let h = 1e-6;
        for i in 0..g.len() {
            let orig = model.experts[expert].model.params().values[i];
            model.experts[expert].model.params_mut().values[i] = orig + h;
            let up = objective(model);
            model.experts[expert].model.params_mut().values[i] = orig - h;
            let down = objective(model);
            model.experts[expert].model.params_mut().values[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g.values[i]).abs() < 1e-5 * fd.abs().max(1.0), "param {i}: {fd} vs {}", g.values[i]);
        }
    }

    #[test]
    fn classification_expert_gradient_matches_fd() {
        let cfg = SupervisedConfig { n_experts: 2, beta2: 0.7, ..Default::default() };
        let mut m = SupervisedModel::new(cfg, TaskKind::Classification { n_classes: 3 }, 2).unwrap();
        m.priors.experts[1] = ActionDist::Categorical(Categorical::new(vec![0.2, 0.5, 0.3]).unwrap());
        fd_check(&mut m, 1, &[0.4, -1.2], Label::Class(2));
    }

    #[test]
    fn regression_expert_gradient_matches_fd() {
        let cfg = SupervisedConfig { n_experts: 1, beta2: 0.7, expert_init_log_std: -0.4, ..Default::default() };
        let mut m = SupervisedModel::new(cfg, TaskKind::Regression, 1).unwrap();
        m.priors.experts[0] = ActionDist::Gaussian(crate::prob::DiagonalGaussian::new(vec![0.3], vec![0.8]).unwrap());
        fd_check(&mut m, 0, &[1.3], Label::Value(-0.5));
    }

    #[test]
    fn usage_sums_to_one_every_epoch() {
        let data = make_classification(ClassificationTask::XorBlobs, 64, 0.2, 0).unwrap();
        let cfg = SupervisedConfig { n_experts: 3, epochs: 5, batch_size: 16, ..Default::default() };
        train_supervised(&data, cfg, |m| {
            assert!((m.row.usage.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(m.row.usage.len(), 3);
            Ok(())
        })
        .unwrap();
    }
}
