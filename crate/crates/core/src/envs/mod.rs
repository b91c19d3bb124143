//! Environments consumed by the on-line learner.

mod pendulum;
mod plant;

pub use pendulum::{PendulumEnv, PendulumSpec, PendulumStart};
pub use plant::{lqr_oracle, LqrResult, PlantEnv, PlantSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Action;
use crate::prob::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpec {
    Discrete { n: usize },
    Continuous { dim: usize, low: f64, high: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    /// Ended by the step cap rather than by reaching a terminal state.
    pub truncated: bool,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

/// A Markov decision process. `reset` hands the environment its own random
/// stream for the episode; stepping after the episode ended is an error.
pub trait Environment: Send {
    fn state_dim(&self) -> usize;
    fn action_spec(&self) -> ActionSpec;
    fn reset(&mut self, rng: RngStream) -> Result<Vec<f64>>;
    fn step(&mut self, action: &Action) -> Result<StepOutcome>;
}

pub(crate) fn scalar_action(action: &Action) -> Result<f64> {
    match action.as_continuous() {
        Some([u]) if u.is_finite() => Ok(*u),
        Some([_]) => Err(Error::contract("non-finite action")),
        _ => Err(Error::contract("expected a one-dimensional continuous action")),
    }
}

pub(crate) fn check_state(state: &[f64]) -> Result<()> {
    if state.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault(format!("non-finite environment state {state:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolicyEvaluation {
    pub mean_reward: f64,
    pub mean_length: f64,
}

/// Mean undiscounted episode reward and length. Episode `i` uses streams
/// derived from `(seed, i)` for both the environment and the policy.
pub fn evaluate_policy<E, P>(env: &mut E, mut policy: P, episodes: usize, seed: u64) -> Result<PolicyEvaluation>
where
    E: Environment + ?Sized,
    P: FnMut(&[f64], &mut RngStream) -> Result<Action>,
{
    if episodes == 0 {
        return Err(Error::contract("episodes must be >= 1"));
    }
    let root = RngStream::new(seed, 0);
    let (mut total_reward, mut total_len) = (0.0, 0usize);
    for ep in 0..episodes {
        let ep_rng = root.fork(ep as u64);
        let mut policy_rng = ep_rng.fork(1);
        let mut state = env.reset(ep_rng.fork(0))?;
        loop {
            let action = policy(&state, &mut policy_rng)?;
            let out = env.step(&action)?;
            total_reward += out.reward;
            total_len += 1;
            if out.done() {
                break;
            }
            state = out.state;
        }
    }
    Ok(PolicyEvaluation { mean_reward: total_reward / episodes as f64, mean_length: total_len as f64 / episodes as f64 })
}
