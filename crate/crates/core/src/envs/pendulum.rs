use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{check_state, scalar_action, ActionSpec, Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::nn::Action;
use crate::prob::RngStream;

/// Where episodes start.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PendulumStart {
    /// Both links upright, angles and velocities perturbed uniformly.
    Upright { angle_noise: f64, velocity_noise: f64 },
    /// Both link angles uniform on the circle (outside the terminal cone), velocities perturbed uniformly.
    Anywhere { velocity_noise: f64 },
}

/// Two-link pendulum with torque on the joint between the links.
///
/// Raw state is `(q1, q2, dq1, dq2)` with `q1 = 0` hanging down and `q2` the
/// elbow angle relative to link 1. Observations are
/// `(wrap(q1 - pi), wrap(q2), dq1 / obs_velocity_scale, dq2 / obs_velocity_scale)`,
/// i.e. angles measured from upright.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumSpec {
    pub link_mass: [f64; 2],
    pub link_length: [f64; 2],
    /// Distance from each joint to its link's centre of mass.
    pub com_distance: [f64; 2],
    /// Moment of inertia of each link about its centre of mass.
    pub inertia: [f64; 2],
    pub gravity: f64,
    /// Torque at an action of ±1.
    pub max_torque: f64,
    /// Viscous friction coefficient at both joints.
    pub damping: f64,
    /// Control interval; each step integrates `substeps` RK4 steps of `dt / substeps`.
    pub dt: f64,
    pub substeps: usize,
    /// Joint speeds are clipped to these bounds after every step.
    pub max_velocity: [f64; 2],
    pub max_steps: usize,
    /// Half-angle of the hanging-down cone that ends an episode.
    pub terminal_cone: f64,
    pub dist_weight: f64,
    pub velocity_weight: f64,
    pub obs_velocity_scale: f64,
    pub start: PendulumStart,
}

impl Default for PendulumSpec {
    fn default() -> Self {
        Self {
            link_mass: [1.0, 1.0],
            link_length: [1.0, 1.0],
            com_distance: [0.5, 0.5],
            inertia: [1.0 / 12.0, 1.0 / 12.0],
            gravity: 9.8,
            max_torque: 10.0,
            damping: 0.05,
            dt: 0.05,
            substeps: 4,
            max_velocity: [4.0 * PI, 9.0 * PI],
            max_steps: 1000,
            terminal_cone: 0.5,
            dist_weight: 1.0,
            velocity_weight: 0.05,
            obs_velocity_scale: 5.0,
            start: PendulumStart::Upright { angle_noise: 0.3, velocity_noise: 0.3 },
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

impl PendulumSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = self
            .link_mass
            .iter()
            .chain(&self.link_length)
            .chain(&self.com_distance)
            .chain(&self.inertia)
            .chain([&self.gravity, &self.max_torque, &self.dt, &self.obs_velocity_scale])
            .all(|v| *v > 0.0 && v.is_finite());
        let speeds_ok = self.max_velocity.iter().all(|v| *v > 0.0);
        if !positive || !speeds_ok || !(self.damping >= 0.0) || self.max_steps == 0 || self.substeps == 0 {
            return Err(Error::contract(format!("invalid pendulum: {self:?}")));
        }
        if !(self.terminal_cone > 0.0 && self.terminal_cone < PI) {
            return Err(Error::contract("terminal_cone must lie in (0, pi)"));
        }
        Ok(())
    }

    /// Angular accelerations for joint torques `(tau1, tau2)` before friction.
    pub fn accelerations(&self, s: &[f64; 4], tau2: f64) -> [f64; 2] {
        let [m1, m2] = self.link_mass;
        let l1 = self.link_length[0];
        let [c1, c2] = self.com_distance;
        let [i1, i2] = self.inertia;
        let g = self.gravity;
        let (q1, q2, dq1, dq2) = (s[0], s[1], s[2], s[3]);
        let (s2, co2) = q2.sin_cos();
        let m11 = m1 * c1 * c1 + m2 * (l1 * l1 + c2 * c2 + 2.0 * l1 * c2 * co2) + i1 + i2;
        let m12 = m2 * (c2 * c2 + l1 * c2 * co2) + i2;
        let m22 = m2 * c2 * c2 + i2;
        let h = m2 * l1 * c2 * s2;
        let grav2 = m2 * c2 * g * (q1 + q2).sin();
        let rhs1 = h * (dq2 * dq2 + 2.0 * dq1 * dq2) - (m1 * c1 + m2 * l1) * g * q1.sin() - grav2 - self.damping * dq1;
        let rhs2 = tau2 - h * dq1 * dq1 - grav2 - self.damping * dq2;
        let det = m11 * m22 - m12 * m12;
        [(m22 * rhs1 - m12 * rhs2) / det, (m11 * rhs2 - m12 * rhs1) / det]
    }

    fn derivative(&self, s: &[f64; 4], tau2: f64) -> [f64; 4] {
        let [a1, a2] = self.accelerations(s, tau2);
        [s[2], s[3], a1, a2]
    }

    /// One classical Runge-Kutta step of length `dt` with constant torque.
    pub fn rk4(&self, s: &[f64; 4], tau2: f64, dt: f64) -> [f64; 4] {
        let add = |a: &[f64; 4], k: &[f64; 4], h: f64| [a[0] + h * k[0], a[1] + h * k[1], a[2] + h * k[2], a[3] + h * k[3]];
        let k1 = self.derivative(s, tau2);
        let k2 = self.derivative(&add(s, &k1, dt / 2.0), tau2);
        let k3 = self.derivative(&add(s, &k2, dt / 2.0), tau2);
        let k4 = self.derivative(&add(s, &k3, dt), tau2);
        let mut out = *s;
        for i in 0..4 {
            out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out
    }

    /// Kinetic plus potential energy, heights measured upward from the base joint.
    pub fn energy(&self, s: &[f64; 4]) -> f64 {
        let [m1, m2] = self.link_mass;
        let l1 = self.link_length[0];
        let [c1, c2] = self.com_distance;
        let [i1, i2] = self.inertia;
        let (q1, q2, dq1, dq2) = (s[0], s[1], s[2], s[3]);
        let w2 = dq1 + dq2;
        let kinetic = 0.5 * (m1 * c1 * c1 + i1) * dq1 * dq1
            + 0.5 * m2 * (l1 * l1 * dq1 * dq1 + c2 * c2 * w2 * w2 + 2.0 * l1 * c2 * dq1 * w2 * q2.cos())
            + 0.5 * i2 * w2 * w2;
        let potential = -self.gravity * (m1 * c1 * q1.cos() + m2 * (l1 * q1.cos() + c2 * (q1 + q2).cos()));
        kinetic + potential
    }

    /// Summed angular distance of both links from upright, in radians.
    pub fn upright_distance(s: &[f64; 4]) -> f64 {
        wrap_angle(s[0] - PI).abs() + wrap_angle(s[0] + s[1] - PI).abs()
    }

    pub fn reward(&self, s: &[f64; 4]) -> f64 {
        let speed = (s[2] * s[2] + s[3] * s[3]).sqrt();
        10.0 - self.dist_weight * Self::upright_distance(s) - self.velocity_weight * speed
    }

    /// Both links inside the hanging-down cone.
    pub fn is_terminal(&self, s: &[f64; 4]) -> bool {
        wrap_angle(s[0]).abs() < self.terminal_cone && wrap_angle(s[0] + s[1]).abs() < self.terminal_cone
    }

    pub fn observe(&self, s: &[f64; 4]) -> Vec<f64> {
        vec![
            wrap_angle(s[0] - PI),
            wrap_angle(s[1]),
            s[2] / self.obs_velocity_scale,
            s[3] / self.obs_velocity_scale,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct PendulumEnv {
    spec: PendulumSpec,
    state: [f64; 4],
    t: usize,
    done: bool,
}

impl PendulumEnv {
    pub fn new(spec: PendulumSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, state: [0.0; 4], t: 0, done: true })
    }

    pub fn spec(&self) -> &PendulumSpec {
        &self.spec
    }

    pub fn raw_state(&self) -> [f64; 4] {
        self.state
    }

    /// Starts an episode from a raw state. Returns the observation and
    /// whether the state is already terminal (in which case the episode is over).
    pub fn reset_to(&mut self, state: [f64; 4]) -> Result<(Vec<f64>, bool)> {
        check_state(&state)?;
        self.state = state;
        self.t = 0;
        let terminal = self.spec.is_terminal(&state);
        self.done = terminal;
        Ok((self.spec.observe(&state), terminal))
    }
}

impl Environment for PendulumEnv {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_spec(&self) -> ActionSpec {
        ActionSpec::Continuous { dim: 1, low: -1.0, high: 1.0 }
    }

    fn reset(&mut self, mut rng: RngStream) -> Result<Vec<f64>> {
        loop {
            let s = match self.spec.start {
                PendulumStart::Upright { angle_noise: a, velocity_noise: v } => [
                    PI + rng.uniform_range(-a, a),
                    rng.uniform_range(-a, a),
                    rng.uniform_range(-v, v),
                    rng.uniform_range(-v, v),
                ],
                PendulumStart::Anywhere { velocity_noise: v } => [
                    rng.uniform_range(-PI, PI),
                    rng.uniform_range(-PI, PI),
                    rng.uniform_range(-v, v),
                    rng.uniform_range(-v, v),
                ],
            };
            let (obs, terminal) = self.reset_to(s)?;
            if !terminal {
                return Ok(obs);
            }
        }
    }

    fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Environment("step after end of episode".into()));
        }
        let u = scalar_action(action)?.clamp(-1.0, 1.0);
        let h = self.spec.dt / self.spec.substeps as f64;
        let mut next = self.state;
        for _ in 0..self.spec.substeps {
            next = self.spec.rk4(&next, u * self.spec.max_torque, h);
        }
        check_state(&next)?;
        for (v, bound) in next[2..].iter_mut().zip(self.spec.max_velocity) {
            *v = v.clamp(-bound, bound);
        }
        self.state = next;
        self.t += 1;
        let reward = self.spec.reward(&next);
        let terminal = self.spec.is_terminal(&next);
        let truncated = !terminal && self.t >= self.spec.max_steps;
        self.done = terminal || truncated;
        Ok(StepOutcome { state: self.spec.observe(&next), reward, terminal, truncated })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frictionless() -> PendulumSpec {
        PendulumSpec { damping: 0.0, dt: 0.01, ..Default::default() }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!((wrap_angle(-0.25) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn upright_rest_reward_near_maximum() {
        let mut env = PendulumEnv::new(PendulumSpec::default()).unwrap();
        env.reset_to([PI, 0.0, 0.0, 0.0]).unwrap();
        let out = env.step(&Action::Continuous(vec![0.0])).unwrap();
        assert!(out.reward >= 9.5 && out.reward <= 10.0, "{}", out.reward);
        assert!(!out.done());
    }

    #[test]
    fn hanging_rest_is_terminal_on_reset() {
        let mut env = PendulumEnv::new(PendulumSpec::default()).unwrap();
        let (_, terminal) = env.reset_to([0.0; 4]).unwrap();
        assert!(terminal);
        assert!(env.step(&Action::Continuous(vec![0.0])).is_err());
    }

    #[test]
    fn frictionless_energy_is_conserved() {
        let spec = frictionless();
        let mut s = [2.0, -1.0, 0.5, -0.3];
        let e0 = spec.energy(&s);
        for _ in 0..1000 {
            s = spec.rk4(&s, 0.0, spec.dt);
        }
        let drift = (spec.energy(&s) - e0).abs() / e0.abs();
        assert!(drift < 1e-4, "relative drift {drift}");
    }

    #[test]
    fn energy_changes_at_rate_of_torque_power() {
        // dE/dt = tau2 * dq2 when frictionless
        let spec = frictionless();
        let s = [1.0, 0.7, 0.4, -0.9];
        let h = 1e-6;
        let e1 = spec.energy(&spec.rk4(&s, 3.0, h));
        let e0 = spec.energy(&spec.rk4(&s, 3.0, -h));
        let rate = (e1 - e0) / (2.0 * h);
        assert!((rate - 3.0 * s[3]).abs() < 1e-5, "{rate}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let spec = frictionless();
        let s = [2.5, 0.8, 1.0, -2.0];
        let horizon = 0.2;
        let integrate = |n: usize| {
            let mut x = s;
            for _ in 0..n {
                x = spec.rk4(&x, 1.0, horizon / n as f64);
            }
            x
        };
        let reference = integrate(400);
        let err = |x: [f64; 4]| x.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let coarse = err(integrate(4));
        let fine = err(integrate(8));
        assert!(coarse / fine >= 8.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn step_integrates_substeps_and_clips_speed() {
        let spec = PendulumSpec { max_velocity: [0.1, 50.0], ..Default::default() };
        let start = [2.0, -1.0, 0.9, 3.0];
        let mut env = PendulumEnv::new(spec.clone()).unwrap();
        env.reset_to(start).unwrap();
        env.step(&Action::Continuous(vec![2.0])).unwrap();
        let mut want = start;
        for _ in 0..spec.substeps {
            want = spec.rk4(&want, spec.max_torque, spec.dt / spec.substeps as f64);
        }
        let got = env.raw_state();
        assert_eq!(&got[..2], &want[..2]);
        assert_eq!(got[2], want[2].clamp(-0.1, 0.1));
        assert_eq!(got[3], want[3]);
        assert!(want[2].abs() > 0.1);
    }

    #[test]
    fn reward_never_exceeds_ten() {
        let spec = PendulumSpec::default();
        let mut rng = RngStream::new(4, 0);
        for _ in 0..10_000 {
            let s = [
                rng.uniform_range(-10.0, 10.0),
                rng.uniform_range(-10.0, 10.0),
                rng.uniform_range(-20.0, 20.0),
                rng.uniform_range(-20.0, 20.0),
            ];
            assert!(spec.reward(&s) <= 10.0);
        }
    }

    #[test]
    fn episode_capped_at_max_steps() {
        let spec = PendulumSpec { max_steps: 5, ..Default::default() };
        let mut env = PendulumEnv::new(spec).unwrap();
        env.reset_to([PI, 0.0, 0.0, 0.0]).unwrap();
        for i in 0..5 {
            let out = env.step(&Action::Continuous(vec![0.0])).unwrap();
            assert_eq!(out.truncated, i == 4);
        }
    }

    #[test]
    fn resets_never_start_terminal() {
        let spec = PendulumSpec { start: PendulumStart::Anywhere { velocity_noise: 0.1 }, ..Default::default() };
        let mut env = PendulumEnv::new(spec.clone()).unwrap();
        for k in 0..200 {
            env.reset(RngStream::new(k, 0)).unwrap();
            assert!(!spec.is_terminal(&env.raw_state()));
        }
    }
}
