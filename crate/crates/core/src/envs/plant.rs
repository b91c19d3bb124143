use serde::{Deserialize, Serialize};

use super::{check_state, scalar_action, ActionSpec, Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::nn::Action;
use crate::prob::RngStream;

/// Scalar switched plant `x' = x + dt (A_i x + B_i u + sigma eps)`, an Euler
/// step of `dx/dt = A_i x + B_i u + eps`; regime 0 for `x >= 0`, regime 1 otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantSpec {
    pub a_coeffs: [f64; 2],
    pub b_coeffs: [f64; 2],
    pub noise_std: f64,
    pub dt: f64,
    pub q_weight: f64,
    pub r_weight: f64,
    pub horizon: usize,
    /// Initial state drawn uniformly from `[-init_range, init_range]`.
    pub init_range: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            a_coeffs: [0.0, 0.0],
            b_coeffs: [1.0, -1.0],
            noise_std: 0.5,
            dt: 0.005,
            q_weight: 1.0,
            r_weight: 0.01,
            horizon: 64,
            init_range: 2.0,
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        let finite = self.a_coeffs.iter().chain(&self.b_coeffs).all(|v| v.is_finite());
        if !finite || !(self.dt > 0.0) || !(self.r_weight > 0.0) || !(self.q_weight >= 0.0) {
            return Err(Error::contract(format!("invalid plant: {self:?}")));
        }
        if !(self.noise_std >= 0.0) || !(self.init_range >= 0.0) || self.horizon == 0 {
            return Err(Error::contract(format!("invalid plant: {self:?}")));
        }
        Ok(())
    }

    pub fn regime(x: f64) -> usize {
        if x >= 0.0 {
            0
        } else {
            1
        }
    }

    /// Deterministic part of one step.
    pub fn drift(&self, x: f64, u: f64) -> f64 {
        let i = Self::regime(x);
        x + self.dt * (self.a_coeffs[i] * x + self.b_coeffs[i] * u)
    }

    pub fn reward(&self, x: f64, u: f64) -> f64 {
        -0.5 * (self.q_weight * x * x + self.r_weight * u * u)
    }
}

#[derive(Clone, Debug)]
pub struct PlantEnv {
    spec: PlantSpec,
    x: f64,
    t: usize,
    done: bool,
    rng: RngStream,
}

impl PlantEnv {
    pub fn new(spec: PlantSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, x: 0.0, t: 0, done: true, rng: RngStream::new(0, 0) })
    }

    pub fn spec(&self) -> &PlantSpec {
        &self.spec
    }

    /// Starts an episode from a given state.
    pub fn reset_to(&mut self, x: f64, rng: RngStream) -> Result<Vec<f64>> {
        check_state(&[x])?;
        self.x = x;
        self.t = 0;
        self.done = false;
        self.rng = rng;
        Ok(vec![x])
    }
}

impl Environment for PlantEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Continuous { dim: 1, low: f64::NEG_INFINITY, high: f64::INFINITY }
    }

    fn reset(&mut self, mut rng: RngStream) -> Result<Vec<f64>> {
        let r = self.spec.init_range;
        let x = rng.uniform_range(-r, r);
        self.reset_to(x, rng)
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Environment("step after end of episode".into()));
        }
        let u = scalar_action(action)?;
        let reward = self.spec.reward(self.x, u);
        let mut next = self.spec.drift(self.x, u);
        if self.spec.noise_std > 0.0 {
            next += self.spec.dt * self.spec.noise_std * self.rng.normal();
        }
        check_state(&[next, reward])?;
        self.x = next;
        self.t += 1;
        let truncated = self.t >= self.spec.horizon;
        self.done = truncated;
        Ok(StepOutcome { state: vec![next], reward, terminal: false, truncated })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrResult {
    /// Feedback gains with `u = -K_i x` in regime `i`.
    pub gains: [f64; 2],
    pub riccati_value: [f64; 2],
    /// Mean episode cost (positive) of the switched controller.
    pub expected_cost: f64,
}

const ORACLE_EPISODES: usize = 1000;
const ORACLE_SEED: u64 = 0x5eed_1a9c;

/// Scalar discrete-time Riccati solution `(P, K)` for `x' = a x + b u`, per-step
/// cost `½(q x² + r u²)`, by structure-preserving doubling iteration.
pub fn scalar_dare(a: f64, b: f64, q: f64, r: f64) -> Result<(f64, f64)> {
    let (mut ak, mut gk, mut hk) = (a, b * b / r, q);
    for _ in 0..200 {
        let w = 1.0 + gk * hk;
        let a_next = ak * ak / w;
        let g_next = gk + ak * ak * gk / w;
        let h_next = hk + ak * ak * hk / w;
        let converged = (h_next - hk).abs() <= 1e-14 * h_next.abs().max(1.0);
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if !hk.is_finite() || hk > 1e150 {
            break;
        }
        if converged {
            let k = a * b * hk / (r + b * b * hk);
            if (a - b * k).abs() >= 1.0 {
                break;
            }
            return Ok((hk, k));
        }
    }
    Err(Error::NumericFault(format!("Riccati iteration did not converge (a={a}, b={b})")))
}

/// Per-regime Riccati gains and the simulated cost of switching between them.
pub fn lqr_oracle(spec: &PlantSpec) -> Result<LqrResult> {
    spec.validate()?;
    let mut gains = [0.0; 2];
    let mut values = [0.0; 2];
    for i in 0..2 {
        let a = 1.0 + spec.dt * spec.a_coeffs[i];
        let b = spec.dt * spec.b_coeffs[i];
        let (p, k) = scalar_dare(a, b, spec.q_weight, spec.r_weight)?;
        gains[i] = k;
        values[i] = p;
    }
    let mut env = PlantEnv::new(spec.clone())?;
    let eval = super::evaluate_policy(
        &mut env,
        |s, _| Ok(Action::Continuous(vec![-gains[PlantSpec::regime(s[0])] * s[0]])),
        ORACLE_EPISODES,
        ORACLE_SEED,
    )?;
    Ok(LqrResult { gains, riccati_value: values, expected_cost: -eval.mean_reward })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(dt: f64) -> PlantSpec {
        PlantSpec { noise_std: 0.0, dt, ..Default::default() }
    }

    fn step_from(spec: PlantSpec, x: f64, u: f64) -> f64 {
        let mut env = PlantEnv::new(spec).unwrap();
        env.reset_to(x, RngStream::new(0, 0)).unwrap();
        env.step(&Action::Continuous(vec![u])).unwrap().state[0]
    }

    #[test]
    fn zero_control_holds_state() {
        assert_eq!(step_from(quiet(0.1), 1.0, 0.0), 1.0);
    }

    #[test]
    fn euler_step_in_each_regime() {
        assert!((step_from(quiet(0.1), 1.0, -1.0) - 0.9).abs() < 1e-15);
        assert!((step_from(quiet(0.1), -1.0, -1.0) + 0.9).abs() < 1e-15);
    }

    #[test]
    fn boundary_belongs_to_regime_zero() {
        assert_eq!(PlantSpec::regime(0.0), 0);
        assert_eq!(PlantSpec::regime(-0.0), 0);
        assert_eq!(PlantSpec::regime(-1e-300), 1);
    }

    #[test]
    fn episode_ends_at_horizon() {
        let mut env = PlantEnv::new(PlantSpec { horizon: 3, ..quiet(0.1) }).unwrap();
        env.reset(RngStream::new(1, 0)).unwrap();
        let a = Action::Continuous(vec![0.0]);
        assert!(!env.step(&a).unwrap().done());
        assert!(!env.step(&a).unwrap().done());
        let last = env.step(&a).unwrap();
        assert!(last.truncated && !last.terminal);
        assert!(env.step(&a).is_err());
    }

    #[test]
    fn dare_matches_closed_form_root() {
        for (a, b, q, r) in [(1.0, 0.01, 1.0, 0.01), (1.0, 0.1, 1.0, 0.01), (1.05, -0.2, 2.0, 0.5), (0.9, 0.3, 1.0, 3.0)] {
            let (p, k) = scalar_dare(a, b, q, r).unwrap();
            // b² P² + ((1 - a²) r - q b²) P - q r = 0
            let c1 = (1.0 - a * a) * r - q * b * b;
            let root = (-c1 + (c1 * c1 + 4.0 * b * b * q * r).sqrt()) / (2.0 * b * b);
            assert!((p - root).abs() < 1e-9 * root.max(1.0), "{p} vs {root}");
            assert!((k - a * b * p / (r + b * b * p)).abs() < 1e-12);
        }
    }

    #[test]
    fn unstabilizable_plant_is_rejected() {
        assert!(scalar_dare(1.1, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn expensive_control_gives_vanishing_gain() {
        let spec = PlantSpec { r_weight: 1e9, ..Default::default() };
        let res = lqr_oracle(&spec).unwrap();
        assert!(res.gains[0].abs() < 1e-3 && res.gains[1].abs() < 1e-3);
    }

    #[test]
    fn symmetric_regimes_give_opposite_gains() {
        let res = lqr_oracle(&PlantSpec::default()).unwrap();
        assert_eq!(res.gains[0], -res.gains[1]);
        assert!(res.gains[0] >= 9.0 && res.gains[0] <= 13.0, "{:?}", res.gains);
    }

    #[test]
    fn zero_policy_at_origin_costs_nothing() {
        let spec = PlantSpec { init_range: 0.0, ..quiet(0.1) };
        let mut env = PlantEnv::new(spec).unwrap();
        let eval = super::super::evaluate_policy(&mut env, |_, _| Ok(Action::Continuous(vec![0.0])), 3, 7).unwrap();
        assert_eq!(eval.mean_reward, 0.0);
        assert_eq!(eval.mean_length, 64.0);
    }

    #[test]
    fn random_policy_is_worse_than_switched_lqr() {
        let spec = PlantSpec::default();
        let lqr = lqr_oracle(&spec).unwrap();
        let mut env = PlantEnv::new(spec).unwrap();
        let random = super::super::evaluate_policy(
            &mut env,
            |_, rng| Ok(Action::Continuous(vec![rng.normal() * 10.0])),
            1000,
            3,
        )
        .unwrap();
        assert!(random.mean_reward < -lqr.expected_cost);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut env = PlantEnv::new(PlantSpec::default()).unwrap();
        let policy = |s: &[f64], rng: &mut RngStream| Ok(Action::Continuous(vec![-5.0 * s[0] + rng.normal()]));
        let a = super::super::evaluate_policy(&mut env, policy, 20, 11).unwrap();
        let b = super::super::evaluate_policy(&mut env, policy, 20, 11).unwrap();
        assert_eq!(a, b);
    }
}
