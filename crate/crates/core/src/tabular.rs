//! Blahut-Arimoto style fixed-point solvers for the single-agent and the
//! two-stage bounded-rational objectives on finite spaces.
//!
//! The single-stage solver maximizes
//! `E[U(s,a)] - (1/beta) E_s[KL(p(a|s) || p(a))]`; the hierarchical solver
//! maximizes `E[U] - (1/beta1) I(S;X) - (1/beta2) I(S;A|X)` by cycling
//! through the selector posterior, selector prior, expert posteriors and
//! expert priors in that order.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::prob::{
    kl_categorical, mutual_information_nats, to_bits, Categorical, RngStream,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteProblem {
    pub n_states: usize,
    pub n_actions: usize,
    pub n_experts: usize,
    /// `utility[s][a]`
    pub utility: Vec<Vec<f64>>,
    pub state_dist: Categorical,
}

impl DiscreteProblem {
    pub fn new(utility: Vec<Vec<f64>>, state_dist: Categorical, n_experts: usize) -> Result<Self> {
        let n_states = utility.len();
        if n_states == 0 || n_experts == 0 {
            return Err(Error::contract("problem needs at least one state and one expert"));
        }
        let n_actions = utility[0].len();
        if n_actions == 0 {
            return Err(Error::contract("problem needs at least one action"));
        }
        for row in &utility {
            check_dim(n_actions, row.len())?;
            if row.iter().any(|u| !u.is_finite()) {
                return Err(Error::contract("utility must be finite"));
            }
        }
        check_dim(n_states, state_dist.len())?;
        Ok(Self { n_states, n_actions, n_experts, utility, state_dist })
    }

    /// Uniform state distribution.
    pub fn uniform(utility: Vec<Vec<f64>>, n_experts: usize) -> Result<Self> {
        let n = utility.len().max(1);
        Self::new(utility, Categorical::uniform(n), n_experts)
    }

    /// `E_s[max_a U(s,a)]`, the perfectly rational value.
    pub fn rational_value(&self) -> f64 {
        self.utility
            .iter()
            .zip(self.state_dist.probs())
            .map(|(row, ps)| ps * row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .sum()
    }
}

/// How posteriors are initialized before the first pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform scaled by seeded multiplicative noise in `[0.9, 1.1]`.
    Perturbed,
    /// Exactly uniform; a symmetric fixed point for the hierarchy.
    Uniform,
    /// Every expert receives the same perturbation and the selector is uniform.
    Duplicated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub init: Init,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 10_000, seed: 0, init: Init::Perturbed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleSolution {
    /// `p(a|s)` per state.
    pub posterior: Vec<Categorical>,
    pub prior: Categorical,
    pub objective_value: f64,
    pub expected_utility: f64,
    /// `E_s[KL(p(a|s) || p(a))]` in nats.
    pub information_nats: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierSolution {
    /// `p(x|s)` per state.
    pub selector: Vec<Categorical>,
    pub selector_prior: Categorical,
    /// `p(a|s,x)` indexed `[s][x]`.
    pub experts: Vec<Vec<Categorical>>,
    /// `p(a|x)` per expert.
    pub expert_priors: Vec<Categorical>,
    /// `F(s,x)` indexed `[s][x]`.
    pub free_energy: Vec<Vec<f64>>,
    pub objective_value: f64,
    pub expected_utility: f64,
    pub mi_sx_nats: f64,
    pub mi_sa_given_x_nats: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// All experts ended up with the same prior, so no specialization happened.
    pub degenerate: bool,
}

fn perturbed_row(n: usize, rng: &mut RngStream) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.9, 1.1)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// `softmax(ln prior + scale * values)` computed in the log domain.
fn tilt(prior: &[f64], scale: f64, values: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for ((o, p), v) in out.iter_mut().zip(prior).zip(values) {
        *o = if *p > 0.0 { p.ln() + scale * v } else { f64::NEG_INFINITY };
        max = max.max(*o);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (pi, qi) in p.iter().zip(q) {
        if *pi > 0.0 {
            total += pi * (pi.ln() - qi.max(1e-300).ln());
        }
    }
    total.max(0.0)
}

fn sup_change(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn to_categoricals(rows: &[Vec<f64>]) -> Result<Vec<Categorical>> {
    rows.iter().map(|r| Categorical::from_weights(r.clone())).collect()
}

fn check_beta(beta: f64, name: &str) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("{name} must be positive and finite, got {beta}")))
    }
}

/// Value of the single-stage objective for a posterior family and a prior.
fn single_objective(problem: &DiscreteProblem, post: &[Vec<f64>], prior: &[f64]) -> (f64, f64) {
    let mut eu = 0.0;
    let mut info = 0.0;
    for ((row, u), ps) in post.iter().zip(&problem.utility).zip(problem.state_dist.probs()) {
        eu += ps * row.iter().zip(u).map(|(p, u)| p * u).sum::<f64>();
        info += ps * kl_raw(row, prior);
    }
    (eu, info)
}

/// Single-stage bounded-rational solver.
pub fn solve_single(problem: &DiscreteProblem, beta: f64, options: &SolverOptions) -> Result<SingleSolution> {
    check_beta(beta, "beta")?;
    let (ns, na) = (problem.n_states, problem.n_actions);
    let ps = problem.state_dist.probs();
    let mut rng = RngStream::new(options.seed, 0);
    let mut post: Vec<Vec<f64>> = match options.init {
        Init::Uniform => vec![vec![1.0 / na as f64; na]; ns],
        _ => (0..ns).map(|_| perturbed_row(na, &mut rng)).collect(),
    };
    let mut prior = marginal(ps, &post);
    let mut next = vec![vec![0.0; na]; ns];
    let mut last_objective = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=options.max_iter {
        iterations = it;
        for (s, row) in next.iter_mut().enumerate() {
            tilt(&prior, beta, &problem.utility[s], row);
        }
        let next_prior = marginal(ps, &next);
        let delta = post
            .iter()
            .zip(&next)
            .map(|(a, b)| sup_change(a, b))
            .fold(sup_change(&prior, &next_prior), f64::max);
        std::mem::swap(&mut post, &mut next);
        prior = next_prior;
        if cfg!(debug_assertions) {
            let (eu, info) = single_objective(problem, &post, &prior);
            let value = eu - info / beta;
            debug_assert!(
                value >= last_objective - 1e-9 * (1.0 + value.abs()),
                "objective decreased: {last_objective} -> {value}"
            );
            last_objective = value;
        }
        if delta < options.tol {
            converged = true;
            break;
        }
    }
    let (eu, info) = single_objective(problem, &post, &prior);
    Ok(SingleSolution {
        posterior: to_categoricals(&post)?,
        prior: Categorical::from_weights(prior)?,
        objective_value: eu - info / beta,
        expected_utility: eu,
        information_nats: info,
        iterations_used: iterations,
        converged,
    })
}

fn marginal(ps: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for (row, p) in rows.iter().zip(ps) {
        for (mi, r) in m.iter_mut().zip(row) {
            *mi += p * r;
        }
    }
    m
}

/// Mutable iterate of the hierarchical fixed point.
#[derive(Clone, Debug)]
struct HierIterate {
    sel: Vec<Vec<f64>>,
    sel_prior: Vec<f64>,
    /// `[s][x][a]`
    exp: Vec<Vec<Vec<f64>>>,
    exp_prior: Vec<Vec<f64>>,
}

impl HierIterate {
    fn initial(problem: &DiscreteProblem, options: &SolverOptions) -> Self {
        let (ns, nx, na) = (problem.n_states, problem.n_experts, problem.n_actions);
        let mut rng = RngStream::new(options.seed, 1);
        let uniform = |n: usize| vec![1.0 / n as f64; n];
        let (sel, exp) = match options.init {
            Init::Uniform => (vec![uniform(nx); ns], vec![vec![uniform(na); nx]; ns]),
            Init::Perturbed => {
                let sel = (0..ns).map(|_| perturbed_row(nx, &mut rng)).collect();
                let exp = (0..ns)
                    .map(|_| (0..nx).map(|_| perturbed_row(na, &mut rng)).collect())
                    .collect();
                (sel, exp)
            }
            Init::Duplicated => {
                let rows: Vec<Vec<f64>> = (0..ns).map(|_| perturbed_row(na, &mut rng)).collect();
                let exp = rows.into_iter().map(|r| vec![r; nx]).collect();
                (vec![uniform(nx); ns], exp)
            }
        };
        let mut it = HierIterate { sel, sel_prior: vec![0.0; nx], exp, exp_prior: vec![vec![0.0; na]; nx] };
        it.sel_prior = marginal(problem.state_dist.probs(), &it.sel);
        it.exp_prior = it.expert_marginals(problem.state_dist.probs(), &it.sel_prior, None);
        it
    }

    /// `p(a|x) = sum_s p(s|x) p(a|s,x)`; experts with no mass keep `fallback`.
    fn expert_marginals(&self, ps: &[f64], sel_prior: &[f64], fallback: Option<&[Vec<f64>]>) -> Vec<Vec<f64>> {
        let nx = sel_prior.len();
        let na = self.exp[0][0].len();
        (0..nx)
            .map(|x| {
                if sel_prior[x] <= 0.0 {
                    return match fallback {
                        Some(f) => f[x].clone(),
                        None => vec![1.0 / na as f64; na],
                    };
                }
                let mut m = vec![0.0; na];
                for (s, p) in ps.iter().enumerate() {
                    let w = p * self.sel[s][x] / sel_prior[x];
                    for (mi, e) in m.iter_mut().zip(&self.exp[s][x]) {
                        *mi += w * e;
                    }
                }
                let total: f64 = m.iter().sum();
                m.into_iter().map(|v| v / total).collect()
            })
            .collect()
    }

    fn free_energy(&self, problem: &DiscreteProblem, beta2: f64) -> Vec<Vec<f64>> {
        (0..problem.n_states)
            .map(|s| {
                (0..problem.n_experts)
                    .map(|x| {
                        let e = &self.exp[s][x];
                        let eu: f64 = e.iter().zip(&problem.utility[s]).map(|(p, u)| p * u).sum();
                        eu - kl_raw(e, &self.exp_prior[x]) / beta2
                    })
                    .collect()
            })
            .collect()
    }

    /// One pass over the four fixed-point equations; returns the sup-norm change.
    fn step(&mut self, problem: &DiscreteProblem, beta1: f64, beta2: f64) -> f64 {
        let ps = problem.state_dist.probs();
        let mut delta: f64 = 0.0;

        let f = self.free_energy(problem, beta2);
        let mut row = vec![0.0; problem.n_experts];
        for s in 0..problem.n_states {
            tilt(&self.sel_prior, beta1, &f[s], &mut row);
            delta = delta.max(sup_change(&row, &self.sel[s]));
            self.sel[s].copy_from_slice(&row);
        }

        let sel_prior = marginal(ps, &self.sel);
        delta = delta.max(sup_change(&sel_prior, &self.sel_prior));
        self.sel_prior = sel_prior;

        let mut row = vec![0.0; problem.n_actions];
        for s in 0..problem.n_states {
            for x in 0..problem.n_experts {
                tilt(&self.exp_prior[x], beta2, &problem.utility[s], &mut row);
                delta = delta.max(sup_change(&row, &self.exp[s][x]));
                self.exp[s][x].copy_from_slice(&row);
            }
        }

        let exp_prior = self.expert_marginals(ps, &self.sel_prior, Some(&self.exp_prior));
        for (new, old) in exp_prior.iter().zip(&self.exp_prior) {
            delta = delta.max(sup_change(new, old));
        }
        self.exp_prior = exp_prior;
        delta
    }
}

/// Decomposition of the hierarchical objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HierTerms {
    pub expected_utility: f64,
    pub mi_sx_nats: f64,
    pub mi_sa_given_x_nats: f64,
}

impl HierTerms {
    pub fn objective(&self, beta1: f64, beta2: f64) -> f64 {
        self.expected_utility - penalty(self.mi_sx_nats, beta1) - penalty(self.mi_sa_given_x_nats, beta2)
    }
}

fn penalty(info: f64, beta: f64) -> f64 {
    if beta.is_infinite() {
        0.0
    } else {
        info / beta
    }
}

/// Expected utility and both information terms for a selector `p(x|s)` and
/// experts `p(a|s,x)`; the priors are the exact marginals.
pub fn hier_terms(problem: &DiscreteProblem, selector: &[Categorical], experts: &[Vec<Categorical>]) -> Result<HierTerms> {
    check_dim(problem.n_states, selector.len())?;
    check_dim(problem.n_states, experts.len())?;
    let ps = problem.state_dist.probs();
    let joint_sx: Vec<Vec<f64>> = selector
        .iter()
        .zip(ps)
        .map(|(sel, p)| {
            check_dim(problem.n_experts, sel.len())?;
            Ok(sel.probs().iter().map(|q| p * q).collect())
        })
        .collect::<Result<_>>()?;
    let mi_sx = mutual_information_nats(&joint_sx)?;

    let mut eu = 0.0;
    let mut mi_sa_x = 0.0;
    for x in 0..problem.n_experts {
        let px: f64 = joint_sx.iter().map(|r| r[x]).sum();
        if px <= 0.0 {
            continue;
        }
        // joint over (s, a) given x, scaled by p(x)
        let mut joint = Vec::with_capacity(problem.n_states);
        for s in 0..problem.n_states {
            let e = &experts[s];
            check_dim(problem.n_experts, e.len())?;
            check_dim(problem.n_actions, e[x].len())?;
            let w = joint_sx[s][x];
            eu += w * e[x].probs().iter().zip(&problem.utility[s]).map(|(p, u)| p * u).sum::<f64>();
            joint.push(e[x].probs().iter().map(|p| w * p / px).collect::<Vec<f64>>());
        }
        mi_sa_x += px * mutual_information_nats(&joint)?;
    }
    Ok(HierTerms { expected_utility: eu, mi_sx_nats: mi_sx, mi_sa_given_x_nats: mi_sa_x })
}

/// `E[U] - (1/beta1) I(S;X) - (1/beta2) I(S;A|X)` with tabular mutual
/// information. Either beta may be infinite, which drops its term.
pub fn objective_hier(
    problem: &DiscreteProblem,
    selector: &[Categorical],
    experts: &[Vec<Categorical>],
    beta1: f64,
    beta2: f64,
) -> Result<f64> {
    Ok(hier_terms(problem, selector, experts)?.objective(beta1, beta2))
}

/// Two-stage hierarchical solver.
pub fn solve_hier(problem: &DiscreteProblem, beta1: f64, beta2: f64, options: &SolverOptions) -> Result<HierSolution> {
    let start = HierIterate::initial(problem, options);
    solve_hier_from(problem, beta1, beta2, options, start).map(|(sol, _)| sol)
}

fn solve_hier_from(
    problem: &DiscreteProblem,
    beta1: f64,
    beta2: f64,
    options: &SolverOptions,
    mut it: HierIterate,
) -> Result<(HierSolution, HierIterate)> {
    check_beta(beta1, "beta1")?;
    check_beta(beta2, "beta2")?;
    let mut converged = false;
    let mut iterations = 0;
    for i in 1..=options.max_iter {
        iterations = i;
        if it.step(problem, beta1, beta2) < options.tol {
            converged = true;
            break;
        }
    }
    let selector = to_categoricals(&it.sel)?;
    let experts: Vec<Vec<Categorical>> = it.exp.iter().map(|r| to_categoricals(r)).collect::<Result<_>>()?;
    let terms = hier_terms(problem, &selector, &experts)?;
    let degenerate = problem.n_experts > 1
        && it.exp_prior.iter().skip(1).all(|p| sup_change(p, &it.exp_prior[0]) < 1e-6);
    let solution = HierSolution {
        free_energy: it.free_energy(problem, beta2),
        selector,
        selector_prior: Categorical::from_weights(it.sel_prior.clone())?,
        experts,
        expert_priors: to_categoricals(&it.exp_prior)?,
        objective_value: terms.objective(beta1, beta2),
        expected_utility: terms.expected_utility,
        mi_sx_nats: terms.mi_sx_nats,
        mi_sa_given_x_nats: terms.mi_sa_given_x_nats,
        iterations_used: iterations,
        converged,
        degenerate,
    };
    Ok((solution, it))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta1: f64,
    pub beta2: f64,
    pub expected_utility: f64,
    pub mi_sx_bits: f64,
    pub mi_sa_given_x_bits: f64,
    pub objective_value: f64,
    pub converged: bool,
}

pub const SWEEP_CSV_HEADER: &str = "beta1,beta2,expected_utility,mi_sx_bits,mi_sa_given_x_bits,converged";

/// Solves the hierarchy along an ascending grid of `(beta1, beta2)` points,
/// warm-starting each solve from the previous solution.
pub fn beta_sweep(problem: &DiscreteProblem, grid: &[(f64, f64)], options: &SolverOptions) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::contract("empty beta grid"));
    }
    for w in grid.windows(2) {
        if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
            return Err(Error::contract("beta grid must be ascending"));
        }
    }
    let mut iterate = HierIterate::initial(problem, options);
    let mut out = Vec::with_capacity(grid.len());
    for &(beta1, beta2) in grid {
        let (sol, next) = solve_hier_from(problem, beta1, beta2, options, iterate)?;
        iterate = next;
        out.push(SweepPoint {
            beta1,
            beta2,
            expected_utility: sol.expected_utility,
            mi_sx_bits: to_bits(sol.mi_sx_nats),
            mi_sa_given_x_bits: to_bits(sol.mi_sa_given_x_nats),
            objective_value: sol.objective_value,
            converged: sol.converged,
        });
    }
    Ok(out)
}

/// Geometric grid from `low` to `high` inclusive.
pub fn geometric_grid(low: f64, high: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![low],
        _ => {
            let ratio = (high / low).powf(1.0 / (points - 1) as f64);
            (0..points).map(|i| low * ratio.powi(i as i32)).collect()
        }
    }
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.beta1, p.beta2, p.expected_utility, p.mi_sx_bits, p.mi_sa_given_x_bits, p.converged
        )?;
    }
    Ok(())
}

/// `E_s[KL(p(a|s) || p(a))]` for a single-stage solution, recomputed from its
/// distributions.
pub fn single_information(problem: &DiscreteProblem, sol: &SingleSolution) -> Result<f64> {
    let mut total = 0.0;
    for (post, ps) in sol.posterior.iter().zip(problem.state_dist.probs()) {
        total += ps * kl_categorical(post, &sol.prior)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity2() -> DiscreteProblem {
        DiscreteProblem::uniform(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1).unwrap()
    }

    #[test]
    fn rational_limit_single() {
        let p = DiscreteProblem::uniform(vec![vec![0.2, 0.9, 0.1], vec![0.7, 0.3, 0.0], vec![0.0, 0.5, 0.6]], 1)
            .unwrap();
        let sol = solve_single(&p, 1e6, &SolverOptions::default()).unwrap();
        assert!((sol.expected_utility - p.rational_value()).abs() < 1e-6);
        for (s, post) in sol.posterior.iter().enumerate() {
            let best = crate::prob::argmax(&p.utility[s]);
            assert!(post.prob(best) > 1.0 - 1e-6);
        }
    }

    #[test]
    fn prior_limit_single() {
        let p = identity2();
        let sol = solve_single(&p, 1e-6, &SolverOptions::default()).unwrap();
        assert!(single_information(&p, &sol).unwrap() < 1e-6);
        assert!(sol.converged);
    }

    #[test]
    fn single_prior_is_marginal() {
        let p = identity2();
        let sol = solve_single(&p, 1.0, &SolverOptions::default()).unwrap();
        let m = Categorical::average(&sol.posterior).unwrap();
        for (a, b) in m.probs().iter().zip(sol.prior.probs()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn one_expert_collapses_to_single_stage() {
        let u = vec![vec![1.0, 0.2, 0.0], vec![0.1, 0.8, 0.4], vec![0.3, 0.3, 0.9]];
        let p = DiscreteProblem::new(u, Categorical::new(vec![0.5, 0.3, 0.2]).unwrap(), 1).unwrap();
        let single = solve_single(&p, 2.0, &SolverOptions::default()).unwrap();
        let hier = solve_hier(&p, 3.0, 2.0, &SolverOptions::default()).unwrap();
        assert!((single.objective_value - hier.objective_value).abs() < 1e-9);
        assert!(!hier.degenerate);
    }

    #[test]
    fn objective_at_priors_is_expected_utility() {
        let p = DiscreteProblem::uniform(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        let sel = vec![Categorical::new(vec![0.3, 0.7]).unwrap(); 2];
        let exp = vec![vec![Categorical::new(vec![0.6, 0.4]).unwrap(); 2]; 2];
        let v = objective_hier(&p, &sel, &exp, 1.0, 1.0).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deterministic_selector_costs_one_bit() {
        let p = DiscreteProblem::uniform(vec![vec![0.0, 0.0], vec![0.0, 0.0]], 2).unwrap();
        let sel = vec![Categorical::one_hot(2, 0), Categorical::one_hot(2, 1)];
        let exp = vec![vec![Categorical::uniform(2); 2]; 2];
        let beta1 = 4.0;
        let terms = hier_terms(&p, &sel, &exp).unwrap();
        assert!((to_bits(terms.mi_sx_nats) - 1.0).abs() < 1e-12);
        let v = objective_hier(&p, &sel, &exp, beta1, 1.0).unwrap();
        assert!((v + 2f64.ln() / beta1).abs() < 1e-12);
    }

    #[test]
    fn uniform_init_is_flagged_degenerate() {
        let u = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let p = DiscreteProblem::uniform(u, 2).unwrap();
        let opts = SolverOptions { init: Init::Uniform, ..Default::default() };
        let sym = solve_hier(&p, 5.0, 5.0, &opts).unwrap();
        assert!(sym.degenerate);
        let asym = solve_hier(&p, 5.0, 5.0, &SolverOptions::default()).unwrap();
        assert!(!asym.degenerate);
        assert!(sym.objective_value <= asym.objective_value + 1e-9);
    }

    #[test]
    fn sweep_rejects_descending_grid() {
        let p = identity2();
        assert!(beta_sweep(&p, &[(2.0, 2.0), (1.0, 2.0)], &SolverOptions::default()).is_err());
        assert!(beta_sweep(&p, &[], &SolverOptions::default()).is_err());
    }

    #[test]
    fn invalid_betas_rejected() {
        let p = identity2();
        assert!(solve_single(&p, 0.0, &SolverOptions::default()).is_err());
        assert!(solve_hier(&p, 1.0, f64::INFINITY, &SolverOptions::default()).is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let p = identity2();
        let pts = beta_sweep(&p, &[(1.0, 1.0), (1.0, 2.0)], &SolverOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&pts, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].ends_with(",true"));
    }
}
