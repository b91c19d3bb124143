//! Brute-force oracles for the tabular solvers.

use brhier_core::prob::{Categorical, RngStream};
use brhier_core::tabular::{
    beta_sweep, hier_terms, objective_hier, solve_hier, solve_single, DiscreteProblem, Init, SolverOptions,
};

/// Single-stage objective evaluated directly from a posterior table, with the
/// prior set to the induced marginal.
fn direct_single_objective(u: &[Vec<f64>], ps: &[f64], post: &[Vec<f64>], beta: f64) -> f64 {
    let na = u[0].len();
    let mut prior = vec![0.0; na];
    for (row, p) in post.iter().zip(ps) {
        for a in 0..na {
            prior[a] += p * row[a];
        }
    }
    let mut value = 0.0;
    for s in 0..u.len() {
        for a in 0..na {
            let q = post[s][a];
            if q > 0.0 {
                value += ps[s] * q * (u[s][a] - (q / prior[a]).ln() / beta);
            }
        }
    }
    value
}

/// Grid over the action prior; for a fixed prior the best posterior is the
/// Gibbs tilt, whose value is `(1/beta) sum_s p(s) ln sum_a q(a) e^{beta U}`.
fn grid_single_oracle(u: &[Vec<f64>], ps: &[f64], beta: f64, step: f64) -> f64 {
    let na = u[0].len();
    let m = (1.0 / step).round() as usize;
    let boltz: Vec<Vec<f64>> = u.iter().map(|r| r.iter().map(|v| (beta * v).exp()).collect()).collect();
    let mut best = f64::NEG_INFINITY;
    let mut counts = vec![0usize; na];
    fn rec(
        i: usize,
        left: usize,
        counts: &mut Vec<usize>,
        m: usize,
        boltz: &[Vec<f64>],
        ps: &[f64],
        beta: f64,
        best: &mut f64,
    ) {
        let na = counts.len();
        if i == na - 1 {
            counts[i] = left;
            let mut v = 0.0;
            for (row, p) in boltz.iter().zip(ps) {
                let z: f64 = row.iter().zip(counts.iter()).map(|(b, c)| b * (*c as f64 / m as f64)).sum();
                v += p * z.ln() / beta;
            }
            if v > *best {
                *best = v;
            }
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            rec(i + 1, left - c, counts, m, boltz, ps, beta, best);
        }
    }
    rec(0, m, &mut counts, m, &boltz, ps, beta, &mut best);
    best
}

fn random_problem(rng: &mut RngStream, max_states: usize, max_actions: usize, experts: usize) -> DiscreteProblem {
    let ns = 1 + rng.below(max_states);
    let na = 1 + rng.below(max_actions);
    let u: Vec<Vec<f64>> = (0..ns).map(|_| (0..na).map(|_| rng.uniform()).collect()).collect();
    let ps = Categorical::from_weights((0..ns).map(|_| 0.2 + rng.uniform()).collect()).unwrap();
    DiscreteProblem::new(u, ps, experts).unwrap()
}

#[test]
fn two_by_two_identity_matches_posterior_grid() {
    let u = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let ps = [0.5, 0.5];
    let beta = 1.0;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=200 {
        for j in 0..=200 {
            let post = vec![vec![i as f64 * 0.005, 1.0 - i as f64 * 0.005], vec![j as f64 * 0.005, 1.0 - j as f64 * 0.005]];
            best = best.max(direct_single_objective(&u, &ps, &post, beta));
        }
    }
    let p = DiscreteProblem::uniform(u, 1).unwrap();
    let sol = solve_single(&p, beta, &SolverOptions::default()).unwrap();
    assert!(sol.converged);
    assert!((sol.objective_value - best).abs() < 1e-3, "{} vs {}", sol.objective_value, best);
}

#[test]
fn random_single_problems_match_grid_oracle() {
    let mut rng = RngStream::new(11, 0);
    for case in 0..12 {
        let p = random_problem(&mut rng, 4, 4, 1);
        if p.n_states * p.n_actions > 16 {
            continue;
        }
        let beta = 0.5 + 9.5 * rng.uniform();
        let oracle = grid_single_oracle(&p.utility, p.state_dist.probs(), beta, 0.005);
        let sol = solve_single(&p, beta, &SolverOptions { seed: case, ..Default::default() }).unwrap();
        assert!(sol.objective_value >= oracle - 1e-3, "case {case}: {} < {}", sol.objective_value, oracle);
        // the oracle is a lower bound up to grid resolution
        assert!(sol.objective_value <= oracle + 1e-2);
    }
}

/// `E[U] - I(S;X)/b1 - I(S;A|X)/b2` evaluated by an explicit triple sum.
fn direct_hier_objective(p: &DiscreteProblem, sel: &[Vec<f64>], exp: &[Vec<Vec<f64>>], b1: f64, b2: f64) -> f64 {
    let ps = p.state_dist.probs();
    let (ns, nx, na) = (p.n_states, p.n_experts, p.n_actions);
    let mut px = vec![0.0; nx];
    let mut pax = vec![vec![0.0; na]; nx];
    for s in 0..ns {
        for x in 0..nx {
            px[x] += ps[s] * sel[s][x];
            for a in 0..na {
                pax[x][a] += ps[s] * sel[s][x] * exp[s][x][a];
            }
        }
    }
    let mut total = 0.0;
    for s in 0..ns {
        for x in 0..nx {
            let psx = ps[s] * sel[s][x];
            if psx <= 0.0 {
                continue;
            }
            total -= psx * (sel[s][x] / px[x]).ln() / b1;
            for a in 0..na {
                let q = exp[s][x][a];
                if q <= 0.0 {
                    continue;
                }
                let marginal = pax[x][a] / px[x];
                total += psx * q * (p.utility[s][a] - (q / marginal).ln() / b2);
            }
        }
    }
    total
}

fn random_simplex(rng: &mut RngStream, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(rng.uniform().max(1e-12)).ln()).collect();
    let t: f64 = w.iter().sum();
    w.into_iter().map(|x| x / t).collect()
}

/// Best of `restarts` random factored policies, each refined by a randomized
/// coordinate hill climb on the direct objective.
fn restart_hier_oracle(p: &DiscreteProblem, b1: f64, b2: f64, restarts: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 99);
    let (ns, nx, na) = (p.n_states, p.n_experts, p.n_actions);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..restarts {
        let mut sel: Vec<Vec<f64>> = (0..ns).map(|_| random_simplex(&mut rng, nx)).collect();
        let mut exp: Vec<Vec<Vec<f64>>> =
            (0..ns).map(|_| (0..nx).map(|_| random_simplex(&mut rng, na)).collect()).collect();
        let mut value = direct_hier_objective(p, &sel, &exp, b1, b2);
        let mut scale = 0.3;
        for round in 0..400 {
            let mut cand_sel = sel.clone();
            let mut cand_exp = exp.clone();
            let s = rng.below(ns);
            let mix = |row: &mut Vec<f64>, rng: &mut RngStream, scale: f64| {
                let target = random_simplex(rng, row.len());
                for (r, t) in row.iter_mut().zip(target) {
                    *r = (1.0 - scale) * *r + scale * t;
                }
            };
            if rng.uniform() < 0.5 {
                mix(&mut cand_sel[s], &mut rng, scale);
            } else {
                let x = rng.below(nx);
                mix(&mut cand_exp[s][x], &mut rng, scale);
            }
            let v = direct_hier_objective(p, &cand_sel, &cand_exp, b1, b2);
            if v > value {
                value = v;
                sel = cand_sel;
                exp = cand_exp;
            }
            if round % 100 == 99 {
                scale *= 0.5;
            }
        }
        best = best.max(value);
    }
    best
}

fn xor_problem() -> DiscreteProblem {
    let u = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
    DiscreteProblem::uniform(u, 2).unwrap()
}

#[test]
fn xor_hierarchy_beats_random_restarts() {
    let p = xor_problem();
    let sol = solve_hier(&p, 5.0, 5.0, &SolverOptions::default()).unwrap();
    assert!(sol.converged);
    let oracle = restart_hier_oracle(&p, 5.0, 5.0, 200, 3);
    assert!(sol.objective_value >= oracle - 1e-3, "{} < {}", sol.objective_value, oracle);
}

#[test]
fn objective_matches_direct_triple_sum() {
    let mut rng = RngStream::new(5, 5);
    for _ in 0..10 {
        let p = random_problem(&mut rng, 4, 3, 3);
        let sel: Vec<Vec<f64>> = (0..p.n_states).map(|_| random_simplex(&mut rng, p.n_experts)).collect();
        let exp: Vec<Vec<Vec<f64>>> = (0..p.n_states)
            .map(|_| (0..p.n_experts).map(|_| random_simplex(&mut rng, p.n_actions)).collect())
            .collect();
        let (b1, b2) = (0.5 + 3.0 * rng.uniform(), 0.5 + 3.0 * rng.uniform());
        let sel_c: Vec<Categorical> = sel.iter().map(|r| Categorical::from_weights(r.clone()).unwrap()).collect();
        let exp_c: Vec<Vec<Categorical>> = exp
            .iter()
            .map(|r| r.iter().map(|e| Categorical::from_weights(e.clone()).unwrap()).collect())
            .collect();
        let v = objective_hier(&p, &sel_c, &exp_c, b1, b2).unwrap();
        let direct = direct_hier_objective(&p, &sel, &exp, b1, b2);
        assert!((v - direct).abs() < 1e-10, "{v} vs {direct}");
    }
}

#[test]
fn rational_limit_hierarchy() {
    let u = vec![vec![1.0, 0.0, 0.2], vec![0.0, 1.0, 0.3], vec![0.1, 0.2, 0.9], vec![1.0, 0.0, 0.0]];
    let p = DiscreteProblem::uniform(u, 3).unwrap();
    let sol = solve_hier(&p, 1e6, 1e6, &SolverOptions::default()).unwrap();
    assert!((sol.expected_utility - p.rational_value()).abs() < 1e-6, "{}", sol.expected_utility);
}

#[test]
fn hierarchy_marginals_and_free_energy_are_consistent() {
    let p = xor_problem();
    let (b1, b2) = (5.0, 5.0);
    let sol = solve_hier(&p, b1, b2, &SolverOptions::default()).unwrap();
    let ps = p.state_dist.probs();
    for x in 0..p.n_experts {
        let px: f64 = (0..p.n_states).map(|s| ps[s] * sol.selector[s].prob(x)).sum();
        assert!((px - sol.selector_prior.prob(x)).abs() < 1e-8);
        for a in 0..p.n_actions {
            let pa: f64 = (0..p.n_states).map(|s| ps[s] * sol.selector[s].prob(x) * sol.experts[s][x].prob(a)).sum::<f64>() / px;
            assert!((pa - sol.expert_priors[x].prob(a)).abs() < 1e-8);
        }
    }
    for s in 0..p.n_states {
        for x in 0..p.n_experts {
            let e = &sol.experts[s][x];
            let eu: f64 = (0..p.n_actions).map(|a| e.prob(a) * p.utility[s][a]).sum();
            let kl = brhier_core::prob::kl_categorical(e, &sol.expert_priors[x]).unwrap();
            assert!((sol.free_energy[s][x] - (eu - kl / b2)).abs() < 1e-12);
        }
    }
}

#[test]
fn duplicated_experts_never_beat_asymmetric_init() {
    let mut rng = RngStream::new(8, 1);
    for seed in 0..5 {
        let p = random_problem(&mut rng, 4, 3, 2);
        let dup = SolverOptions { init: Init::Duplicated, seed, ..Default::default() };
        let asym = SolverOptions { seed, ..Default::default() };
        let a = solve_hier(&p, 4.0, 4.0, &dup).unwrap();
        let b = solve_hier(&p, 4.0, 4.0, &asym).unwrap();
        assert!(a.objective_value <= b.objective_value + 1e-9);
        if a.degenerate {
            let terms = hier_terms(&p, &a.selector, &a.experts).unwrap();
            assert!(terms.mi_sx_nats < 1e-6);
        }
    }
}

#[test]
fn sweep_utility_non_decreasing_in_beta2() {
    let u = vec![
        vec![1.0, 0.0, 0.5, 0.2],
        vec![0.0, 1.0, 0.5, 0.1],
        vec![0.3, 0.2, 1.0, 0.0],
        vec![0.9, 0.1, 0.0, 1.0],
    ];
    let p = DiscreteProblem::uniform(u, 2).unwrap();
    let grid: Vec<(f64, f64)> = brhier_core::tabular::geometric_grid(0.1, 50.0, 15).into_iter().map(|b| (3.0, b)).collect();
    let pts = beta_sweep(&p, &grid, &SolverOptions::default()).unwrap();
    assert_eq!(pts.len(), grid.len());
    for w in pts.windows(2) {
        assert!(w[1].expected_utility >= w[0].expected_utility - 1e-6, "{:?}", w);
    }
    assert!(pts.iter().all(|p| p.converged));
}

#[test]
fn sweep_low_beta_endpoint_has_no_information() {
    let p = xor_problem();
    let pts = beta_sweep(&p, &[(1e-6, 1e-6), (1.0, 1.0)], &SolverOptions::default()).unwrap();
    assert!(pts[0].mi_sx_bits < 1e-6);
    assert!(pts[0].mi_sa_given_x_bits < 1e-6);
}

#[test]
fn single_point_sweep_equals_solve() {
    let p = xor_problem();
    let opts = SolverOptions::default();
    let pts = beta_sweep(&p, &[(5.0, 5.0)], &opts).unwrap();
    let sol = solve_hier(&p, 5.0, 5.0, &opts).unwrap();
    assert_eq!(pts[0].objective_value, sol.objective_value);
    assert_eq!(pts[0].expected_utility, sol.expected_utility);
}
