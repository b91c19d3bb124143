//! On-line specialization learner: a softmax selector over linear experts,
//! twin critics for rewards-to-go and free-energies-to-go, and EMA priors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{ActionSpec, Environment};
use crate::error::{check_dim, Error, Result};
use crate::nn::{
    log_prob_and_grad, Action, Activation, Direction, Head, HeadGrad, HeadOutput, MlpSpec, Model, OptimizerConfig,
    OptimizerKind, OptimizerState, ParamVector,
};
use crate::prob::{entropy, kl_categorical, kl_gaussian, mi_estimate_from_samples, Categorical, DiagonalGaussian, RngStream};

/// Serde for resource parameters: finite numbers, or the string `"inf"`.
pub mod beta_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" || s == "infinity" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(D::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

/// `1/beta`, zero for an infinite resource parameter.
pub fn penalty(beta: f64) -> f64 {
    if beta.is_infinite() {
        0.0
    } else {
        1.0 / beta
    }
}

fn valid_beta(beta: f64) -> bool {
    beta > 0.0 && !beta.is_nan()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageSource {
    /// Both advantages from `f` with the free-energy critic.
    FreeEnergy,
    /// Selector advantage from `r` with the reward critic, expert advantage from `f` with the free-energy critic.
    Reward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShsConfig {
    pub n_experts: usize,
    #[serde(with = "beta_serde")]
    pub beta1: f64,
    #[serde(with = "beta_serde")]
    pub beta2: f64,
    pub gamma: f64,
    /// EMA momentum of the expert priors.
    pub lambda1: f64,
    /// EMA momentum of the selector prior.
    pub lambda2: f64,
    pub lr_selector: f64,
    pub lr_experts: f64,
    pub lr_critics: f64,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    pub iterations: usize,
    pub trajectories_per_update: usize,
    pub horizon: usize,
    pub phase_length: usize,
    pub critic_epochs: usize,
    pub selector_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub activation: Activation,
    pub expert_init_log_std: f64,
    /// When false the expert log-std stays at its initial value.
    pub expert_std_learned: bool,
    pub advantage_source: AdvantageSource,
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for ShsConfig {
    fn default() -> Self {
        Self {
            n_experts: 2,
            beta1: 10.0,
            beta2: 10.0,
            gamma: 0.99,
            lambda1: 0.99,
            lambda2: 0.99,
            lr_selector: 3e-4,
            lr_experts: 1e-3,
            lr_critics: 3e-4,
            optimizer: OptimizerKind::Adam,
            clip_norm: 5.0,
            iterations: 100,
            trajectories_per_update: 8,
            horizon: 64,
            phase_length: 1,
            critic_epochs: 5,
            selector_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            activation: Activation::Tanh,
            expert_init_log_std: 0.5f64.ln(),
            expert_std_learned: true,
            advantage_source: AdvantageSource::FreeEnergy,
            normalize_advantages: true,
            seed: 0,
        }
    }
}

impl ShsConfig {
    /// Two experts on the switched plant: a free selector (`beta1 = inf`),
    /// weakly regularized experts and a long discount, since with a small
    /// step the 64-step episode is a short stretch of continuous time.
    pub fn plant() -> Self {
        Self {
            n_experts: 2,
            beta1: f64::INFINITY,
            beta2: 1000.0,
            gamma: 0.999,
            lr_selector: 3e-3,
            lr_experts: 0.05,
            lr_critics: 3e-3,
            iterations: 2500,
            trajectories_per_update: 16,
            horizon: 64,
            critic_epochs: 3,
            selector_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            ..Self::default()
        }
    }

    /// Five experts on the two-link pendulum. Larger beta2 lets the experts
    /// sharpen faster than their priors widen, so mean expert KL grows over training.
    pub fn pendulum() -> Self {
        Self {
            n_experts: 5,
            beta1: f64::INFINITY,
            beta2: 3.0,
            lr_selector: 1e-3,
            lr_experts: 1e-2,
            lr_critics: 1e-3,
            iterations: 2000,
            trajectories_per_update: 16,
            horizon: 1000,
            critic_epochs: 3,
            selector_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::contract(format!("invalid config: {m}")));
        if self.n_experts == 0 {
            return bad("n_experts must be >= 1");
        }
        if !valid_beta(self.beta1) || !valid_beta(self.beta2) {
            return bad("beta1 and beta2 must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.lambda1) || !(0.0..1.0).contains(&self.lambda2) {
            return bad("lambda1 and lambda2 must lie in [0, 1)");
        }
        if [self.lr_selector, self.lr_experts, self.lr_critics, self.clip_norm].iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return bad("learning rates and clip_norm must be positive");
        }
        if self.trajectories_per_update == 0 || self.horizon == 0 || self.phase_length == 0 {
            return bad("trajectories_per_update, horizon and phase_length must be >= 1");
        }
        if self.selector_hidden.iter().chain(&self.critic_hidden).any(|h| *h == 0) {
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

/// An action distribution of an expert or an expert prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionDist {
    Categorical(Categorical),
    Gaussian(DiagonalGaussian),
}

impl ActionDist {
    pub fn from_head(head: HeadOutput) -> Result<Self> {
        match head {
            HeadOutput::Categorical(c) => Ok(ActionDist::Categorical(c)),
            HeadOutput::Gaussian(g) => Ok(ActionDist::Gaussian(g)),
            HeadOutput::Value(_) => Err(Error::contract("value head is not an action distribution")),
        }
    }

    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (ActionDist::Categorical(c), Action::Discrete(k)) if *k < c.len() => Ok(c.log_prob(*k)),
            (ActionDist::Gaussian(g), Action::Continuous(a)) => g.log_prob(a),
            _ => Err(Error::contract("action does not match distribution")),
        }
    }

    pub fn kl(&self, other: &ActionDist) -> Result<f64> {
        match (self, other) {
            (ActionDist::Categorical(p), ActionDist::Categorical(q)) => kl_categorical(p, q),
            (ActionDist::Gaussian(p), ActionDist::Gaussian(q)) => kl_gaussian(p, q),
            _ => Err(Error::contract("KL between different distribution families")),
        }
    }

    /// EMA toward the batch average of `posteriors`: probability vectors for
    /// categoricals, mixture moments `(mean of means, mean variance + variance of means)` for Gaussians.
    pub fn ema_toward(&self, posteriors: &[&ActionDist], keep: f64) -> Result<ActionDist> {
        if posteriors.is_empty() {
            return Ok(self.clone());
        }
        match self {
            ActionDist::Categorical(prior) => {
                let cats = posteriors
                    .iter()
                    .map(|p| match p {
                        ActionDist::Categorical(c) => Ok(c),
                        _ => Err(Error::contract("mixed posterior families")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ActionDist::Categorical(prior.mix(&Categorical::average(cats)?, keep)?))
            }
            ActionDist::Gaussian(prior) => {
                let d = prior.dim();
                let n = posteriors.len() as f64;
                let (mut m1, mut m2, mut var) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
                for p in posteriors {
                    let ActionDist::Gaussian(g) = p else {
                        return Err(Error::contract("mixed posterior families"));
                    };
                    check_dim(d, g.dim())?;
                    for i in 0..d {
                        m1[i] += g.mean()[i] / n;
                        m2[i] += g.mean()[i] * g.mean()[i] / n;
                        var[i] += g.variance()[i] / n;
                    }
                }
                let mean = (0..d).map(|i| keep * prior.mean()[i] + (1.0 - keep) * m1[i]).collect();
                let variance = (0..d)
                    .map(|i| {
                        let batch = var[i] + (m2[i] - m1[i] * m1[i]).max(0.0);
                        keep * prior.variance()[i] + (1.0 - keep) * batch
                    })
                    .collect();
                Ok(ActionDist::Gaussian(DiagonalGaussian::new(mean, variance)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorState {
    pub selector: Categorical,
    pub experts: Vec<ActionDist>,
}

/// A policy network with its optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub model: Model,
    pub optimizer: OptimizerState,
}

impl Learner {
    pub fn new(model: Model, config: OptimizerConfig) -> Self {
        let optimizer = OptimizerState::new(config, model.params());
        Self { model, optimizer }
    }

    pub fn step(&mut self, grad: &ParamVector, direction: Direction) -> Result<()> {
        self.optimizer.step_model(&mut self.model, grad, direction)
    }
}

/// State-value regressor. The network predicts targets standardized by
/// running statistics; when the statistics move, the output layer is
/// rescaled so predictions in target units are unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub learner: Learner,
    pub target_mean: f64,
    pub target_std: f64,
    pub initialized: bool,
}

const CRITIC_STAT_MOMENTUM: f64 = 0.9;
const CRITIC_MIN_STD: f64 = 1e-3;

impl Critic {
    pub fn new(model: Model, config: OptimizerConfig) -> Self {
        Self { learner: Learner::new(model, config), target_mean: 0.0, target_std: 1.0, initialized: false }
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        let cache = self.learner.model.forward_raw(state)?;
        Ok(self.target_mean + self.target_std * cache.raw[0])
    }

    fn output_layer(&self) -> (String, String) {
        let last = self.learner.model.spec.hidden.len();
        (format!("w{last}"), format!("b{last}"))
    }

    fn update_statistics(&mut self, targets: &[f64]) {
        let n = targets.len() as f64;
        let mean = targets.iter().sum::<f64>() / n;
        let sq = targets.iter().map(|t| t * t).sum::<f64>() / n;
        let (old_mean, old_std) = (self.target_mean, self.target_std);
        let (new_mean, new_sq) = if self.initialized {
            let k = CRITIC_STAT_MOMENTUM;
            let old_sq = old_std * old_std + old_mean * old_mean;
            (k * old_mean + (1.0 - k) * mean, k * old_sq + (1.0 - k) * sq)
        } else {
            (mean, sq)
        };
        let new_std = (new_sq - new_mean * new_mean).max(0.0).sqrt().max(CRITIC_MIN_STD);
        // Untrained predictions carry no information worth preserving.
        if self.initialized {
            let (w, b) = self.output_layer();
            let params = self.learner.model.params_mut();
            for v in params.group_mut(&w).expect("layout") {
                *v *= old_std / new_std;
            }
            for v in params.group_mut(&b).expect("layout") {
                *v = (old_std * *v + old_mean - new_mean) / new_std;
            }
        }
        self.target_mean = new_mean;
        self.target_std = new_std;
        self.initialized = true;
    }

    /// Mean squared error in target units.
    pub fn mse(&self, states: &[&[f64]], targets: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (s, t) in states.iter().zip(targets) {
            let e = self.value(s)? - t;
            total += e * e;
        }
        Ok(total / targets.len().max(1) as f64)
    }

    /// Updates target statistics, then takes `epochs` full-batch gradient
    /// steps on the standardized squared error. Returns the final MSE in target units.
    pub fn fit(&mut self, states: &[&[f64]], targets: &[f64], epochs: usize) -> Result<f64> {
        check_dim(states.len(), targets.len())?;
        if targets.is_empty() {
            return Ok(0.0);
        }
        self.update_statistics(targets);
        let n = targets.len() as f64;
        for _ in 0..epochs {
            let model = &self.learner.model;
            let (mean, std) = (self.target_mean, self.target_std);
            let grads = states
                .par_chunks(256)
                .zip(targets.par_chunks(256))
                .map(|(ss, ts)| -> Result<ParamVector> {
                    let mut g = model.zero_grad();
                    for (s, t) in ss.iter().zip(ts) {
                        let cache = model.forward_raw(s)?;
                        let err = cache.raw[0] - (t - mean) / std;
                        model.backward(&cache, &HeadGrad { d_out: vec![2.0 * err / n], d_log_std: None }, &mut g)?;
                    }
                    Ok(g)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grad = model.zero_grad();
            for g in &grads {
                grad.add_scaled(g, 1.0);
            }
            self.learner.step(&grad, Direction::Descend)?;
        }
        self.mse(states, targets)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub expert: usize,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub logp_selector: f64,
    pub logp_expert: f64,
    pub logp_expert_prior: f64,
    pub logp_selector_prior: f64,
    /// Selector posterior at `state`.
    pub selector_posterior: Categorical,
    /// Posterior of the chosen expert at `state`.
    pub expert_posterior: ActionDist,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// The episode was cut by the step cap and bootstraps from the last next state.
    pub truncated: bool,
    pub free_energy: Vec<f64>,
    pub rewards_to_go: Vec<f64>,
    pub free_energies_to_go: Vec<f64>,
    pub adv_selector: Vec<f64>,
    pub adv_expert: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }
}

/// `f = r - (1/beta2) (log pi(a|s,x) - log pi(a|x))`.
pub fn free_energy_term(t: &Transition, beta2: f64) -> f64 {
    if beta2.is_infinite() {
        return t.reward;
    }
    t.reward - penalty(beta2) * (t.logp_expert - t.logp_expert_prior)
}

/// Discounted backward sums with nothing beyond the last element.
pub fn discounted_to_go(values: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let mut acc = 0.0;
    for (o, v) in out.iter_mut().zip(values).rev() {
        acc = v + gamma * acc;
        *o = acc;
    }
    out
}

/// One-step temporal-difference advantages `u_t + gamma V(s_{t+1}) - V(s_t)`,
/// with `V(s_{t+1}) = 0` after a terminal transition.
pub fn td_advantages(traj: &Trajectory, utilities: &[f64], critic: &dyn Fn(&[f64]) -> Result<f64>, gamma: f64) -> Result<Vec<f64>> {
    let n = traj.len();
    let mut values = Vec::with_capacity(n + 1);
    for t in &traj.transitions {
        values.push(critic(&t.state)?);
    }
    let mut out = Vec::with_capacity(n);
    for (i, t) in traj.transitions.iter().enumerate() {
        let next = if t.terminal {
            0.0
        } else if i + 1 < n {
            values[i + 1]
        } else if traj.truncated {
            critic(&t.next_state)?
        } else {
            0.0
        };
        out.push(utilities[i] + gamma * next - values[i]);
    }
    Ok(out)
}

/// Fills `f`, `R`, `F` and both advantages.
pub fn returns_and_advantages(
    traj: &mut Trajectory,
    reward_critic: &dyn Fn(&[f64]) -> Result<f64>,
    free_energy_critic: &dyn Fn(&[f64]) -> Result<f64>,
    gamma: f64,
    beta2: f64,
    source: AdvantageSource,
) -> Result<()> {
    let rewards: Vec<f64> = traj.transitions.iter().map(|t| t.reward).collect();
    traj.free_energy = traj.transitions.iter().map(|t| free_energy_term(t, beta2)).collect();
    traj.rewards_to_go = discounted_to_go(&rewards, gamma);
    traj.free_energies_to_go = discounted_to_go(&traj.free_energy, gamma);
    traj.adv_expert = td_advantages(traj, &traj.free_energy, free_energy_critic, gamma)?;
    traj.adv_selector = match source {
        AdvantageSource::FreeEnergy => traj.adv_expert.clone(),
        AdvantageSource::Reward => td_advantages(traj, &rewards, reward_critic, gamma)?,
    };
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Selector,
    Experts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub expert: usize,
    pub action: Action,
    pub logp_selector: f64,
    pub logp_expert: f64,
    pub logp_expert_prior: f64,
    pub logp_selector_prior: f64,
    pub selector_posterior: Categorical,
    pub expert_posterior: ActionDist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub mean_reward: f64,
    pub mean_free_energy: f64,
    pub mi_sx_bits: f64,
    pub selector_kl_nats: f64,
    pub expert_kl_nats: f64,
    pub entropy_selector_nats: f64,
    pub usage: Vec<f64>,
}

impl MetricsRow {
    pub fn csv_header(n_experts: usize) -> String {
        let mut h = String::from("iter,mean_reward,mean_free_energy,mi_sx_bits,selector_kl_nats,expert_kl_nats,entropy_selector_nats");
        for i in 0..n_experts {
            h.push_str(&format!(",usage_x{i}"));
        }
        h
    }

    pub fn csv_line(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            self.mean_reward,
            self.mean_free_energy,
            self.mi_sx_bits,
            self.selector_kl_nats,
            self.expert_kl_nats,
            self.entropy_selector_nats
        );
        for u in &self.usage {
            s.push_str(&format!(",{u}"));
        }
        s
    }
}

/// Everything the learner owns: networks, optimizers, priors and the iteration counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShsState {
    pub config: ShsConfig,
    pub state_dim: usize,
    pub action_spec: ActionSpec,
    /// Absent with a single expert.
    pub selector: Option<Learner>,
    pub experts: Vec<Learner>,
    pub reward_critic: Critic,
    pub free_energy_critic: Critic,
    pub priors: PriorState,
    pub iteration: u64,
}

const INIT_STREAM: u64 = 1;
const ROLLOUT_STREAM: u64 = 2;

impl ShsState {
    pub fn new(config: ShsConfig, state_dim: usize, action_spec: ActionSpec) -> Result<Self> {
        config.validate()?;
        if state_dim == 0 {
            return Err(Error::contract("state_dim must be >= 1"));
        }
        let mut rng = RngStream::new(config.seed, INIT_STREAM);
        let selector = if config.n_experts > 1 {
            let spec = MlpSpec {
                input_dim: state_dim,
                output_dim: config.n_experts,
                hidden: config.selector_hidden.clone(),
                activation: config.activation,
            };
            Some(Learner::new(Model::new(spec, Head::Softmax, &mut rng)?, config.optimizer(config.lr_selector)))
        } else {
            None
        };
        let (out_dim, head, prior) = match action_spec {
            ActionSpec::Discrete { n } => (n, Head::Softmax, ActionDist::Categorical(Categorical::uniform(n))),
            ActionSpec::Continuous { dim, .. } => {
                let var = (2.0 * config.expert_init_log_std).exp();
                (
                    dim,
                    Head::Gaussian { init_log_std: config.expert_init_log_std },
                    ActionDist::Gaussian(DiagonalGaussian::new(vec![0.0; dim], vec![var; dim])?),
                )
            }
        };
        let expert_spec = MlpSpec { input_dim: state_dim, output_dim: out_dim, hidden: vec![], activation: config.activation };
        let experts = (0..config.n_experts)
            .map(|_| Ok(Learner::new(Model::new(expert_spec.clone(), head, &mut rng)?, config.optimizer(config.lr_experts))))
            .collect::<Result<Vec<_>>>()?;
        let critic_spec = MlpSpec {
            input_dim: state_dim,
            output_dim: 1,
            hidden: config.critic_hidden.clone(),
            activation: config.activation,
        };
        let reward_critic = Critic::new(Model::new(critic_spec.clone(), Head::Identity, &mut rng)?, config.optimizer(config.lr_critics));
        let free_energy_critic = Critic::new(Model::new(critic_spec, Head::Identity, &mut rng)?, config.optimizer(config.lr_critics));
        let priors = PriorState { selector: Categorical::uniform(config.n_experts), experts: vec![prior; config.n_experts] };
        Ok(Self { config, state_dim, action_spec, selector, experts, reward_critic, free_energy_critic, priors, iteration: 0 })
    }

    /// Phase of the current iteration. With one expert only experts train.
    pub fn phase(&self) -> Phase {
        if self.selector.is_none() {
            return Phase::Experts;
        }
        if (self.iteration / self.config.phase_length as u64).is_multiple_of(2) {
            Phase::Selector
        } else {
            Phase::Experts
        }
    }

    pub fn selector_posterior(&self, state: &[f64]) -> Result<Categorical> {
        check_dim(self.state_dim, state.len())?;
        match &self.selector {
            Some(sel) => Ok(sel.model.forward(state)?.0.categorical().expect("softmax head").clone()),
            None => Ok(Categorical::one_hot(1, 0)),
        }
    }

    pub fn expert_posterior(&self, expert: usize, state: &[f64]) -> Result<ActionDist> {
        let e = self.experts.get(expert).ok_or_else(|| Error::contract(format!("no expert {expert}")))?;
        ActionDist::from_head(e.model.forward(state)?.0)
    }

    /// Samples `x ~ pi(x|s)` then `a ~ pi(a|s,x)`.
    pub fn act(&self, state: &[f64], rng: &mut RngStream) -> Result<Decision> {
        let sel = self.selector_posterior(state)?;
        let expert = if self.selector.is_some() { sel.sample(rng) } else { 0 };
        let post = self.expert_posterior(expert, state)?;
        let action = match &post {
            ActionDist::Categorical(c) => Action::Discrete(c.sample(rng)),
            ActionDist::Gaussian(g) => Action::Continuous(g.sample(rng)),
        };
        let logp_expert = post.log_prob(&action)?;
        let logp_expert_prior = self.priors.experts[expert].log_prob(&action)?;
        let (logp_selector, logp_selector_prior) = if self.selector.is_some() {
            (sel.log_prob(expert), self.priors.selector.log_prob(expert))
        } else {
            (0.0, 0.0)
        };
        let all = [logp_selector, logp_expert, logp_expert_prior, logp_selector_prior];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault(format!("non-finite log-probability {all:?}")));
        }
        Ok(Decision {
            expert,
            action,
            logp_selector,
            logp_expert,
            logp_expert_prior,
            logp_selector_prior,
            selector_posterior: sel,
            expert_posterior: post,
        })
    }

    /// Most probable expert, then the mode of its action distribution.
    pub fn greedy_action(&self, state: &[f64]) -> Result<Action> {
        let expert = self.selector_posterior(state)?.argmax();
        match self.expert_posterior(expert, state)? {
            ActionDist::Categorical(c) => Ok(Action::Discrete(c.argmax())),
            ActionDist::Gaussian(g) => Ok(Action::Continuous(g.mean().to_vec())),
        }
    }

    /// Runs one episode of at most `horizon` steps.
    pub fn rollout<E: Environment + ?Sized>(&self, env: &mut E, rng: &RngStream) -> Result<Trajectory> {
        let mut policy_rng = rng.fork(1);
        let mut state = env.reset(rng.fork(0))?;
        let mut traj = Trajectory::default();
        for _ in 0..self.config.horizon {
            let d = self.act(&state, &mut policy_rng)?;
            let out = env.step(&d.action)?;
            let next = out.state.clone();
            traj.transitions.push(Transition {
                state,
                expert: d.expert,
                action: d.action,
                reward: out.reward,
                next_state: out.state,
                terminal: out.terminal,
                logp_selector: d.logp_selector,
                logp_expert: d.logp_expert,
                logp_expert_prior: d.logp_expert_prior,
                logp_selector_prior: d.logp_selector_prior,
                selector_posterior: d.selector_posterior,
                expert_posterior: d.expert_posterior,
            });
            if out.terminal {
                return Ok(traj);
            }
            if out.truncated {
                break;
            }
            state = next;
        }
        traj.truncated = true;
        Ok(traj)
    }

    fn rollout_stream(&self, iteration: u64) -> RngStream {
        RngStream::new(self.config.seed, ROLLOUT_STREAM).fork(iteration)
    }

    /// Collects `trajectories_per_update` episodes in parallel.
    pub fn collect<E: Environment + Clone + Sync>(&self, env: &E) -> Result<Vec<Trajectory>> {
        let root = self.rollout_stream(self.iteration);
        (0..self.config.trajectories_per_update as u64)
            .into_par_iter()
            .map(|k| {
                let mut local = env.clone();
                self.rollout(&mut local, &root.fork(k))
            })
            .collect()
    }

    /// Fills returns and advantages for every trajectory of the batch.
    pub fn prepare(&self, batch: &mut [Trajectory]) -> Result<()> {
        let vr = |s: &[f64]| self.reward_critic.value(s);
        let vf = |s: &[f64]| self.free_energy_critic.value(s);
        batch.par_iter_mut().try_for_each(|t| {
            returns_and_advantages(t, &vr, &vf, self.config.gamma, self.config.beta2, self.config.advantage_source)
        })?;
        if self.config.normalize_advantages {
            normalize(batch.iter_mut().flat_map(|t| t.adv_expert.iter_mut()));
        }
        Ok(())
    }

    /// Per-transition selector weights `A^F - (1/beta1) log(pi(x|s)/pi(x))`,
    /// normalized over the batch when configured.
    pub fn selector_weights(&self, batch: &[Trajectory]) -> Vec<f64> {
        let k = penalty(self.config.beta1);
        let mut w: Vec<f64> = batch
            .iter()
            .flat_map(|t| {
                t.transitions
                    .iter()
                    .zip(&t.adv_selector)
                    .map(move |(tr, a)| if k == 0.0 { *a } else { a - k * (tr.logp_selector - tr.logp_selector_prior) })
            })
            .collect();
        if self.config.normalize_advantages {
            normalize(w.iter_mut());
        }
        w
    }

    /// Score-function estimate of the selector objective gradient, averaged over transitions.
    pub fn selector_gradient(&self, batch: &[Trajectory]) -> Result<Option<ParamVector>> {
        let Some(sel) = &self.selector else { return Ok(None) };
        let weights = self.selector_weights(batch);
        let items: Vec<(&Transition, f64)> = batch.iter().flat_map(|t| t.transitions.iter()).zip(weights).collect();
        if items.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let n = items.len() as f64;
        let model = &sel.model;
        let parts = items
            .par_chunks(256)
            .map(|chunk| -> Result<ParamVector> {
                let mut g = model.zero_grad();
                for (tr, w) in chunk {
                    if *w == 0.0 {
                        continue;
                    }
                    let (out, cache) = model.forward(&tr.state)?;
                    let (_, hg) = log_prob_and_grad(&out, &Action::Discrete(tr.expert))?;
                    model.backward(&cache, &hg.scaled(w / n), &mut g)?;
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = model.zero_grad();
        for p in &parts {
            total.add_scaled(p, 1.0);
        }
        Ok(Some(total))
    }

    pub fn selector_update(&mut self, batch: &[Trajectory]) -> Result<()> {
        if let Some(g) = self.selector_gradient(batch)? {
            self.selector.as_mut().expect("selector").step(&g, Direction::Ascend)?;
        }
        Ok(())
    }

    /// Per-expert score-function gradients over the transitions each expert
    /// produced; `None` for experts with no transitions.
    pub fn expert_gradients(&self, batch: &[Trajectory]) -> Result<Vec<Option<ParamVector>>> {
        (0..self.experts.len())
            .into_par_iter()
            .map(|x| {
                let model = &self.experts[x].model;
                let mut g = model.zero_grad();
                let mut count = 0usize;
                for t in batch {
                    for (tr, a) in t.transitions.iter().zip(&t.adv_expert) {
                        if tr.expert != x {
                            continue;
                        }
                        count += 1;
                        if *a == 0.0 {
                            continue;
                        }
                        let (out, cache) = model.forward(&tr.state)?;
                        let (_, hg) = log_prob_and_grad(&out, &tr.action)?;
                        model.backward(&cache, &hg.scaled(*a), &mut g)?;
                    }
                }
                if count == 0 {
                    return Ok(None);
                }
                g.scale(1.0 / count as f64);
                if !self.config.expert_std_learned {
                    if let Some(ls) = g.group_mut("log_std") {
                        ls.fill(0.0);
                    }
                }
                Ok(Some(g))
            })
            .collect()
    }

    pub fn expert_update(&mut self, batch: &[Trajectory]) -> Result<()> {
        let grads = self.expert_gradients(batch)?;
        for (e, g) in self.experts.iter_mut().zip(grads) {
            if let Some(g) = g {
                e.step(&g, Direction::Ascend)?;
            }
        }
        Ok(())
    }

    /// EMA of the selector prior toward the batch-mean posterior and of each
    /// expert prior toward that expert's posteriors where it acted.
    pub fn prior_update(&mut self, batch: &[Trajectory]) -> Result<()> {
        let all: Vec<&Transition> = batch.iter().flat_map(|t| t.transitions.iter()).collect();
        if all.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if self.selector.is_some() {
            let mean = Categorical::average(all.iter().map(|t| &t.selector_posterior))?;
            self.priors.selector = self.priors.selector.mix(&mean, self.config.lambda2)?;
        }
        for x in 0..self.experts.len() {
            let posts: Vec<&ActionDist> = all.iter().filter(|t| t.expert == x).map(|t| &t.expert_posterior).collect();
            self.priors.experts[x] = self.priors.experts[x].ema_toward(&posts, self.config.lambda1)?;
        }
        Ok(())
    }

    /// Fits `V_r` to rewards-to-go and `V_f` to free-energies-to-go.
    pub fn critic_update(&mut self, batch: &[Trajectory]) -> Result<(f64, f64)> {
        let states: Vec<&[f64]> = batch.iter().flat_map(|t| t.transitions.iter().map(|tr| tr.state.as_slice())).collect();
        let r: Vec<f64> = batch.iter().flat_map(|t| t.rewards_to_go.iter().copied()).collect();
        let f: Vec<f64> = batch.iter().flat_map(|t| t.free_energies_to_go.iter().copied()).collect();
        let epochs = self.config.critic_epochs;
        let mr = self.reward_critic.fit(&states, &r, epochs)?;
        let mf = self.free_energy_critic.fit(&states, &f, epochs)?;
        Ok((mr, mf))
    }

    /// Batch diagnostics under the priors that generated it.
    pub fn metrics(&self, batch: &[Trajectory]) -> Result<MetricsRow> {
        let all: Vec<&Transition> = batch.iter().flat_map(|t| t.transitions.iter()).collect();
        let n_traj = batch.len().max(1) as f64;
        let mean_reward = batch.iter().map(|t| t.total_reward()).sum::<f64>() / n_traj;
        let mean_free_energy = batch.iter().map(|t| t.free_energy.iter().sum::<f64>()).sum::<f64>() / n_traj;
        let n = all.len().max(1) as f64;
        let (mut mi, mut sel_kl, mut ent) = (0.0, 0.0, 0.0);
        if self.selector.is_some() && !all.is_empty() {
            let marginal = Categorical::average(all.iter().map(|t| &t.selector_posterior))?;
            mi = mi_estimate_from_samples(all.iter().map(|t| &t.selector_posterior), &marginal)?;
            for t in &all {
                sel_kl += kl_categorical(&t.selector_posterior, &self.priors.selector)? / n;
                ent += entropy(&t.selector_posterior) / n;
            }
        }
        let mut exp_kl = 0.0;
        for t in &all {
            exp_kl += t.expert_posterior.kl(&self.priors.experts[t.expert])? / n;
        }
        Ok(MetricsRow {
            iter: self.iteration,
            mean_reward,
            mean_free_energy,
            mi_sx_bits: mi,
            selector_kl_nats: sel_kl,
            expert_kl_nats: exp_kl,
            entropy_selector_nats: ent,
            usage: self.priors.selector.probs().to_vec(),
        })
    }

    /// One outer iteration: collect, estimate, update the phase's policy,
    /// fit both critics, move the priors.
    pub fn iterate<E: Environment + Clone + Sync>(&mut self, env: &E) -> Result<MetricsRow> {
        let mut batch = self.collect(env)?;
        self.prepare(&mut batch)?;
        let mut row = self.metrics(&batch)?;
        match self.phase() {
            Phase::Selector => self.selector_update(&batch)?,
            Phase::Experts => self.expert_update(&batch)?,
        }
        self.critic_update(&batch)?;
        self.prior_update(&batch)?;
        row.usage = self.priors.selector.probs().to_vec();
        self.iteration += 1;
        Ok(row)
    }
}

fn normalize<'a>(values: impl Iterator<Item = &'a mut f64>) {
    let mut v: Vec<&mut f64> = values.collect();
    if v.len() < 2 {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().map(|x| **x).sum::<f64>() / n;
    let var = v.iter().map(|x| (**x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    for x in v.iter_mut() {
        **x = (**x - mean) / sd;
    }
}

/// Runs `iterations` outer iterations, handing each metrics row to `sink`.
/// On error the rows already emitted stand.
pub fn train<E, F>(state: &mut ShsState, env: &E, iterations: usize, mut sink: F) -> Result<()>
where
    E: Environment + Clone + Sync,
    F: FnMut(&MetricsRow) -> Result<()>,
{
    for _ in 0..iterations {
        let row = state.iterate(env)?;
        sink(&row)?;
    }
    Ok(())
}
