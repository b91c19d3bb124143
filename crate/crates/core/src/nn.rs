//! Small differentiable function approximators with hand-written reverse
//! mode: affine/MLP bodies topped by a softmax, diagonal-Gaussian or identity
//! head, plus SGD and Adam.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::prob::{Categorical, DiagonalGaussian, RngStream, VARIANCE_FLOOR};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter storage with a named layout. Groups tile `values` exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<ParamGroup>,
}

impl ParamVector {
    pub fn from_shapes(shapes: &[(&str, Vec<usize>)]) -> Self {
        let mut layout = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, shape) in shapes {
            let g = ParamGroup { name: name.to_string(), offset, shape: shape.clone() };
            offset += g.len();
            layout.push(g);
        }
        Self { values: vec![0.0; offset], layout }
    }

    /// Checks that the layout tiles the value vector with no gaps or overlaps.
    pub fn validate(&self) -> Result<()> {
        let mut offset = 0;
        for g in &self.layout {
            if g.offset != offset {
                return Err(Error::contract(format!("group {} starts at {} not {}", g.name, g.offset, offset)));
            }
            offset += g.len();
        }
        check_dim(offset, self.values.len())
    }

    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], layout: self.layout.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn congruent(&self, other: &ParamVector) -> bool {
        self.layout == other.layout && self.values.len() == other.values.len()
    }

    fn find(&self, name: &str) -> Option<&ParamGroup> {
        self.layout.iter().find(|g| g.name == name)
    }

    pub fn group(&self, name: &str) -> Option<&[f64]> {
        let g = self.find(name)?;
        Some(&self.values[g.offset..g.offset + g.len()])
    }

    /// Group by position in the layout.
    pub fn group_at(&self, index: usize) -> &[f64] {
        let g = &self.layout[index];
        &self.values[g.offset..g.offset + g.len()]
    }

    pub fn group_at_mut(&mut self, index: usize) -> &mut [f64] {
        let (offset, len) = (self.layout[index].offset, self.layout[index].len());
        &mut self.values[offset..offset + len]
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let g = self.find(name)?.clone();
        Some(&mut self.values[g.offset..g.offset + g.len()])
    }

    pub fn fill(&mut self, v: f64) {
        self.values.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|x| *x *= k);
    }

    pub fn add_scaled(&mut self, other: &ParamVector, k: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += k * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Name of the first group containing a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.layout
            .iter()
            .find(|g| self.values[g.offset..g.offset + g.len()].iter().any(|v| !v.is_finite()))
            .map(|g| g.name.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::contract(format!("all layer widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    Softmax,
    /// Diagonal Gaussian with a state-independent learnable log standard deviation.
    Gaussian { init_log_std: f64 },
    Identity,
}

/// A linear (affine) policy: no hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "head")]
pub enum LinearPolicySpec {
    Softmax { input_dim: usize, n_classes: usize },
    Gaussian { input_dim: usize, action_dim: usize, init_log_std: f64 },
}

impl LinearPolicySpec {
    pub fn build(&self, rng: &mut RngStream) -> Result<Model> {
        match *self {
            LinearPolicySpec::Softmax { input_dim, n_classes } => Model::new(
                MlpSpec { input_dim, output_dim: n_classes, hidden: vec![], activation: Activation::Tanh },
                Head::Softmax,
                rng,
            ),
            LinearPolicySpec::Gaussian { input_dim, action_dim, init_log_std } => Model::new(
                MlpSpec { input_dim, output_dim: action_dim, hidden: vec![], activation: Activation::Tanh },
                Head::Gaussian { init_log_std },
                rng,
            ),
        }
    }
}

/// Discrete index or continuous vector, matching the head that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn as_continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }

    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(i) => Some(*i),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    Categorical(Categorical),
    Gaussian(DiagonalGaussian),
    Value(Vec<f64>),
}

impl HeadOutput {
    pub fn sample(&self, rng: &mut RngStream) -> Result<Action> {
        match self {
            HeadOutput::Categorical(c) => Ok(Action::Discrete(c.sample(rng))),
            HeadOutput::Gaussian(g) => Ok(Action::Continuous(g.sample(rng))),
            HeadOutput::Value(_) => Err(Error::contract("cannot sample from a value head")),
        }
    }

    /// Mode of the distribution (lowest index on ties).
    pub fn mode(&self) -> Result<Action> {
        match self {
            HeadOutput::Categorical(c) => Ok(Action::Discrete(c.argmax())),
            HeadOutput::Gaussian(g) => Ok(Action::Continuous(g.mean().to_vec())),
            HeadOutput::Value(_) => Err(Error::contract("value head has no mode")),
        }
    }

    pub fn categorical(&self) -> Option<&Categorical> {
        match self {
            HeadOutput::Categorical(c) => Some(c),
            _ => None,
        }
    }

    pub fn gaussian(&self) -> Option<&DiagonalGaussian> {
        match self {
            HeadOutput::Gaussian(g) => Some(g),
            _ => None,
        }
    }

    pub fn value(&self) -> Option<&[f64]> {
        match self {
            HeadOutput::Value(v) => Some(v),
            _ => None,
        }
    }

    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        log_prob_and_grad(self, action).map(|(lp, _)| lp)
    }
}

/// Gradient of a scalar with respect to the head's raw outputs (logits, mean
/// or value) and, for Gaussian heads, the log standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub d_out: Vec<f64>,
    pub d_log_std: Option<Vec<f64>>,
}

impl HeadGrad {
    pub fn scaled(mut self, k: f64) -> Self {
        self.d_out.iter_mut().for_each(|v| *v *= k);
        if let Some(d) = self.d_log_std.as_mut() {
            d.iter_mut().for_each(|v| *v *= k);
        }
        self
    }
}

fn min_log_std() -> f64 {
    0.5 * VARIANCE_FLOOR.ln()
}

/// `log pi(value)` and its gradient through softmax logits or Gaussian
/// `(mean, log_std)`.
pub fn log_prob_and_grad(head: &HeadOutput, value: &Action) -> Result<(f64, HeadGrad)> {
    match (head, value) {
        (HeadOutput::Categorical(c), Action::Discrete(k)) => {
            if *k >= c.len() {
                return Err(Error::contract(format!("class {k} outside 0..{}", c.len())));
            }
            let mut d = c.probs().iter().map(|p| -p).collect::<Vec<_>>();
            d[*k] += 1.0;
            Ok((c.log_prob(*k), HeadGrad { d_out: d, d_log_std: None }))
        }
        (HeadOutput::Gaussian(g), Action::Continuous(a)) => {
            check_dim(g.dim(), a.len())?;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::contract("gaussian sample must be finite"));
            }
            let lp = g.log_prob(a)?;
            let mut d_mean = Vec::with_capacity(a.len());
            let mut d_ls = Vec::with_capacity(a.len());
            for ((m, v), x) in g.mean().iter().zip(g.variance()).zip(a) {
                let z = x - m;
                d_mean.push(z / v);
                // at the floor the variance no longer depends on log_std
                d_ls.push(if *v > VARIANCE_FLOOR { z * z / v - 1.0 } else { 0.0 });
            }
            Ok((lp, HeadGrad { d_out: d_mean, d_log_std: Some(d_ls) }))
        }
        _ => Err(Error::contract("sample type does not match head")),
    }
}

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

/// An MLP body with a head. Parameters live in one [`ParamVector`] with
/// groups `w{i}` (shape `[out, in]`), `b{i}` and, for Gaussian heads, `log_std`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Model {
    pub spec: MlpSpec,
    pub head: Head,
    params: ParamVector,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    #[serde(skip)]
    generation: u64,
}

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self { spec: self.spec.clone(), head: self.head, params: self.params.clone(), id: fresh_id(), generation: 0 }
    }
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.head == other.head && self.params == other.params
    }
}

/// Activations recorded by [`Model::forward`] for a later [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    model_id: u64,
    generation: u64,
    /// Input followed by the post-activation output of every hidden layer.
    layers: Vec<Vec<f64>>,
    /// Raw head input: logits, mean or value.
    pub raw: Vec<f64>,
}

impl Model {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn new(spec: MlpSpec, head: Head, rng: &mut RngStream) -> Result<Self> {
        let mut m = Self::zeros(spec, head)?;
        let widths = m.spec.widths();
        for i in 0..widths.len() - 1 {
            let bound = 1.0 / (widths[i] as f64).sqrt();
            for w in m.params.group_mut(&format!("w{i}")).expect("layout") {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        Ok(m)
    }

    /// All weights and biases zero; Gaussian log-std at its initial value.
    pub fn zeros(spec: MlpSpec, head: Head) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for i in 0..widths.len() - 1 {
            shapes.push((format!("w{i}"), vec![widths[i + 1], widths[i]]));
            shapes.push((format!("b{i}"), vec![widths[i + 1]]));
        }
        if let Head::Gaussian { .. } = head {
            shapes.push(("log_std".into(), vec![spec.output_dim]));
        }
        let named: Vec<(&str, Vec<usize>)> = shapes.iter().map(|(n, s)| (n.as_str(), s.clone())).collect();
        let mut params = ParamVector::from_shapes(&named);
        if let Head::Gaussian { init_log_std } = head {
            params.group_mut("log_std").expect("layout").fill(init_log_std);
        }
        Ok(Self { spec, head, params, id: fresh_id(), generation: 0 })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// Replaces parameters; invalidates outstanding caches.
    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if !self.params.congruent(&params) {
            return Err(Error::contract("parameter layout does not match model"));
        }
        self.params = params;
        self.generation += 1;
        Ok(())
    }

    /// Mutable access; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> &mut ParamVector {
        self.generation += 1;
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn n_layers(&self) -> usize {
        self.spec.hidden.len() + 1
    }

    /// Raw output and per-layer activations.
    pub fn forward_raw(&self, input: &[f64]) -> Result<ForwardCache> {
        check_dim(self.spec.input_dim, input.len())?;
        let n = self.n_layers();
        let mut layers = Vec::with_capacity(n);
        layers.push(input.to_vec());
        let mut raw = Vec::new();
        for l in 0..n {
            let w = self.params.group_at(2 * l);
            let b = self.params.group_at(2 * l + 1);
            let x = layers.last().expect("input");
            let out_dim = b.len();
            let in_dim = x.len();
            let mut y = b.to_vec();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            debug_assert_eq!(y.len(), out_dim);
            if l + 1 < n {
                y.iter_mut().for_each(|v| *v = self.spec.activation.apply(*v));
                layers.push(y);
            } else {
                raw = y;
            }
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault("non-finite network output".into()));
        }
        Ok(ForwardCache { model_id: self.id, generation: self.generation, layers, raw })
    }

    /// Forward pass through body and head.
    pub fn forward(&self, input: &[f64]) -> Result<(HeadOutput, ForwardCache)> {
        let cache = self.forward_raw(input)?;
        let out = self.head_output(&cache.raw)?;
        Ok((out, cache))
    }

    fn head_output(&self, raw: &[f64]) -> Result<HeadOutput> {
        match self.head {
            Head::Softmax => Ok(HeadOutput::Categorical(Categorical::from_logits(raw)?)),
            Head::Gaussian { .. } => {
                let ls = self.params.group_at(2 * self.n_layers());
                let var = ls.iter().map(|l| (2.0 * l.max(min_log_std())).exp()).collect();
                Ok(HeadOutput::Gaussian(DiagonalGaussian::new(raw.to_vec(), var)?))
            }
            Head::Identity => Ok(HeadOutput::Value(raw.to_vec())),
        }
    }

    /// Accumulates into `grad` the gradient of a scalar whose derivative with
    /// respect to the head is `upstream`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &HeadGrad, grad: &mut ParamVector) -> Result<()> {
        if cache.model_id != self.id || cache.generation != self.generation {
            return Err(Error::contract("stale forward cache"));
        }
        if !grad.congruent(&self.params) {
            return Err(Error::contract("gradient layout does not match model"));
        }
        check_dim(self.spec.output_dim, upstream.d_out.len())?;
        if let Some(d_ls) = &upstream.d_log_std {
            if !matches!(self.head, Head::Gaussian { .. }) {
                return Err(Error::contract("no log_std group"));
            }
            let idx = 2 * self.n_layers();
            let ls = self.params.group_at(idx);
            let g = grad.group_at_mut(idx);
            for ((gi, d), l) in g.iter_mut().zip(d_ls).zip(ls) {
                if *l >= min_log_std() {
                    *gi += d;
                }
            }
        }
        let n = self.n_layers();
        let mut delta = upstream.d_out.clone();
        for l in (0..n).rev() {
            let x = &cache.layers[l];
            let in_dim = x.len();
            {
                let gw = grad.group_at_mut(2 * l);
                for (o, d) in delta.iter().enumerate() {
                    if *d != 0.0 {
                        for (g, xi) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                }
            }
            for (g, d) in grad.group_at_mut(2 * l + 1).iter_mut().zip(&delta) {
                *g += d;
            }
            if l == 0 {
                break;
            }
            let w = self.params.group_at(2 * l);
            let mut prev = vec![0.0; in_dim];
            for (o, d) in delta.iter().enumerate() {
                if *d != 0.0 {
                    for (p, wi) in prev.iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                        *p += d * wi;
                    }
                }
            }
            for (p, y) in prev.iter_mut().zip(x) {
                *p *= self.spec.activation.derivative_from_output(*y);
            }
            delta = prev;
        }
        Ok(())
    }

    pub fn zero_grad(&self) -> ParamVector {
        self.params.zeros_like()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global-norm clipping threshold applied before every step.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate: 3e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, clip_norm: Some(5.0) }
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self { learning_rate, ..Default::default() }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, learning_rate, clip_norm: None, ..Default::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParamVector) -> Self {
        let n = match config.kind {
            OptimizerKind::Adam => params.len(),
            OptimizerKind::Sgd => 0,
        };
        Self { config, first_moment: vec![0.0; n], second_moment: vec![0.0; n], step: 0 }
    }

    /// Applies one update to `params` in place.
    pub fn apply(&mut self, params: &mut ParamVector, grad: &ParamVector, direction: Direction) -> Result<()> {
        if !params.congruent(grad) {
            return Err(Error::contract("gradient layout does not match parameters"));
        }
        if let Some(name) = grad.first_non_finite() {
            return Err(Error::NumericFault(format!("gradient group {name}")));
        }
        let mut scale = 1.0;
        if let Some(clip) = self.config.clip_norm {
            let norm = grad.norm();
            if norm > clip {
                scale = clip / norm;
            }
        }
        let sign = match direction {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        };
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values.iter_mut().zip(&grad.values) {
                    *p += sign * lr * scale * g;
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != params.len() {
                    return Err(Error::contract("optimizer moments do not match parameters"));
                }
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for i in 0..params.len() {
                    let g = scale * grad.values[i];
                    self.first_moment[i] = b1 * self.first_moment[i] + (1.0 - b1) * g;
                    self.second_moment[i] = b2 * self.second_moment[i] + (1.0 - b2) * g * g;
                    let m_hat = self.first_moment[i] / c1;
                    let v_hat = self.second_moment[i] / c2;
                    params.values[i] += sign * lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NumericFault(format!("parameter group {name}")));
        }
        Ok(())
    }

    /// [`OptimizerState::apply`] on a model's parameters.
    pub fn step_model(&mut self, model: &mut Model, grad: &ParamVector, direction: Direction) -> Result<()> {
        self.apply(model.params_mut(), grad, direction)
    }
}
