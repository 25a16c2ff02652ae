//! Exact policy evaluation and the analytic checks built on it.
//!
//! Everything here is ground truth for the rest of the crate: v and q from a
//! direct linear solve (iterative sweep above [`EXACT_SOLVE_MAX_STATES`]
//! states), the visitation measure d, the performance-difference lemma, the
//! trust-region lower bound, and the closed forms for the aliased four-state
//! task.
//!
//! Conventions: J(pi) = sum_s mu(s) v_pi(s). `occupancy` is the expected
//! discounted visit count sum_t gamma^t P(s_t = s) (for the episodic
//! discount-1 case, expected visits per episode; terminal states count 0).
//! `d` is `occupancy` normalized to sum 1.

use crate::env::TabularMDP;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Largest state count handled by the direct LU solve; larger systems fall
/// back to fixed-point iteration.
pub const EXACT_SOLVE_MAX_STATES: usize = 200;

const ITER_TOL: f64 = 1e-13;
const ITER_MAX: usize = 2_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("policy evaluation did not converge after {0} iterations (improper episodic MDP?)")]
    NonConvergent(usize),
    #[error("linear system is singular; with discount 1 every state must reach a terminal state")]
    Singular,
    #[error("policy row for state {state} is not a distribution (sum {sum:.12})")]
    BadPolicy { state: usize, sum: f64 },
    #[error("p = {0} outside [0, 1]")]
    POutOfRange(f64),
    #[error("the trust-region bound requires discount < 1 (got {0})")]
    BoundNeedsDiscount(f64),
}

#[derive(Debug, Clone)]
pub struct ExactEvaluation {
    pub v: Vec<f64>,
    /// q[s][a]
    pub q: Vec<Vec<f64>>,
    /// Expected discounted visit counts (visits per episode when discount is 1).
    pub occupancy: Vec<f64>,
    /// `occupancy` normalized to sum 1.
    pub d: Vec<f64>,
    pub j: f64,
}

fn check_policy(mdp: &TabularMDP, policy: &[Vec<f64>]) -> Result<(), OracleError> {
    assert_eq!(policy.len(), mdp.num_states(), "policy must have one row per state");
    for (s, row) in policy.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != mdp.num_actions() || (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0)
        {
            return Err(OracleError::BadPolicy { state: s, sum });
        }
    }
    Ok(())
}

/// Exact evaluation of a per-state policy: v, q, visitation, and J.
pub fn evaluate(mdp: &TabularMDP, policy: &[Vec<f64>]) -> Result<ExactEvaluation, OracleError> {
    check_policy(mdp, policy)?;
    let n = mdp.num_states();
    let gamma = mdp.discount();
    let nonterminal: Vec<usize> = (0..n).filter(|&s| !mdp.is_terminal(s)).collect();

    // Policy-conditioned transition kernel and expected reward, restricted to
    // non-terminal rows. Columns onto terminal states can be dropped for v
    // (terminal v is 0) but are needed for the occupancy solve over all states.
    let p_pi = |s: usize, s2: usize| -> f64 {
        (0..mdp.num_actions()).map(|a| policy[s][a] * mdp.p(s, a, s2)).sum()
    };
    let r_pi = |s: usize| -> f64 {
        (0..mdp.num_actions()).map(|a| policy[s][a] * mdp.expected_reward(s, a)).sum()
    };

    let mut v = vec![0.0; n];
    if nonterminal.len() <= EXACT_SOLVE_MAX_STATES {
        // Solve (I - gamma P_nn) v_n = r_n over non-terminal states.
        let m = nonterminal.len();
        let a = DMatrix::from_fn(m, m, |i, j| {
            let (si, sj) = (nonterminal[i], nonterminal[j]);
            (if i == j { 1.0 } else { 0.0 }) - gamma * p_pi(si, sj)
        });
        let b = DVector::from_fn(m, |i, _| r_pi(nonterminal[i]));
        let sol = a.lu().solve(&b).ok_or(OracleError::Singular)?;
        for (i, &s) in nonterminal.iter().enumerate() {
            v[s] = sol[i];
        }
    } else {
        // Fixed-point sweep v <- r + gamma P v; contraction for gamma < 1 and
        // for proper episodic tasks.
        let mut iters = 0;
        loop {
            let mut delta: f64 = 0.0;
            let mut next = vec![0.0; n];
            for &s in &nonterminal {
                let mut acc = r_pi(s);
                for s2 in 0..n {
                    let p = p_pi(s, s2);
                    if p > 0.0 {
                        acc += gamma * p * v[s2];
                    }
                }
                delta = delta.max((acc - v[s]).abs());
                next[s] = acc;
            }
            v = next;
            iters += 1;
            if delta < ITER_TOL {
                break;
            }
            if iters >= ITER_MAX {
                return Err(OracleError::NonConvergent(iters));
            }
        }
    }

    let q: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            (0..mdp.num_actions())
                .map(|a| {
                    (0..n).map(|s2| mdp.p(s, a, s2) * (mdp.r(s, a, s2) + gamma * v[s2])).sum()
                })
                .collect()
        })
        .collect();

    let occupancy = occupancy_under(mdp, &|s, s2| p_pi(s, s2))?;
    let total: f64 = occupancy.iter().sum();
    let d: Vec<f64> = occupancy.iter().map(|&o| o / total).collect();
    let j = (0..n).map(|s| mdp.initial()[s] * v[s]).sum();

    Ok(ExactEvaluation { v, q, occupancy, d, j })
}

/// Expected discounted visit counts eta = mu^T sum_t (gamma P)^t, with terminal
/// states counted as 0 (for discount 1 this is the per-episode occupancy; for
/// discount < 1 terminal states would otherwise accumulate self-loop visits
/// that carry no reward or decision).
fn occupancy_under(
    mdp: &TabularMDP,
    p_pi: &dyn Fn(usize, usize) -> f64,
) -> Result<Vec<f64>, OracleError> {
    let n = mdp.num_states();
    let gamma = mdp.discount();
    let nonterminal: Vec<usize> = (0..n).filter(|&s| !mdp.is_terminal(s)).collect();
    let m = nonterminal.len();
    let mut occupancy = vec![0.0; n];
    if m <= EXACT_SOLVE_MAX_STATES {
        // eta = mu + gamma P^T eta over non-terminal states.
        let a = DMatrix::from_fn(m, m, |i, j| {
            let (si, sj) = (nonterminal[i], nonterminal[j]);
            (if i == j { 1.0 } else { 0.0 }) - gamma * p_pi(sj, si)
        });
        let b = DVector::from_fn(m, |i, _| mdp.initial()[nonterminal[i]]);
        let sol = a.lu().solve(&b).ok_or(OracleError::Singular)?;
        for (i, &s) in nonterminal.iter().enumerate() {
            occupancy[s] = sol[i];
        }
    } else {
        let mut eta: Vec<f64> = nonterminal.iter().map(|&s| mdp.initial()[s]).collect();
        let mut iters = 0;
        loop {
            let mut next: Vec<f64> = nonterminal.iter().map(|&s| mdp.initial()[s]).collect();
            let mut delta: f64 = 0.0;
            for (j, &sj) in nonterminal.iter().enumerate() {
                for (i, &si) in nonterminal.iter().enumerate() {
                    next[j] += gamma * p_pi(si, sj) * eta[i];
                }
                delta = delta.max((next[j] - eta[j]).abs());
            }
            eta = next;
            iters += 1;
            if delta < ITER_TOL {
                break;
            }
            if iters >= ITER_MAX {
                return Err(OracleError::NonConvergent(iters));
            }
        }
        for (i, &s) in nonterminal.iter().enumerate() {
            occupancy[s] = eta[i];
        }
    }
    Ok(occupancy)
}

/// Visitation-weighted aggregation of q over the states sharing each
/// observation: q(o, a) = sum_{s in o} w_s q(s, a) with w_s = d(s) / sum d
/// within the observation. Unvisited observations fall back to uniform
/// weights. For the aliased task these weights are exactly
/// (1/2, p/2, (1-p)/2).
pub fn obs_q(mdp: &TabularMDP, eval: &ExactEvaluation) -> Vec<Vec<f64>> {
    aggregate_by_obs(mdp, eval, |s| eval.q[s].clone())
}

/// Visitation-weighted state values per observation (the biased aggregate a
/// value function over observations converges to).
pub fn obs_v(mdp: &TabularMDP, eval: &ExactEvaluation) -> Vec<f64> {
    aggregate_by_obs(mdp, eval, |s| vec![eval.v[s]]).into_iter().map(|row| row[0]).collect()
}

fn aggregate_by_obs(
    mdp: &TabularMDP,
    eval: &ExactEvaluation,
    value: impl Fn(usize) -> Vec<f64>,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(mdp.num_obs());
    for o in 0..mdp.num_obs() {
        let states = mdp.states_of_obs(o);
        let mass: f64 = states.iter().map(|&s| eval.d[s]).sum();
        let width = value(states[0]).len();
        let mut row = vec![0.0; width];
        for &s in &states {
            let w = if mass > 0.0 { eval.d[s] / mass } else { 1.0 / states.len() as f64 };
            for (acc, x) in row.iter_mut().zip(value(s)) {
                *acc += w * x;
            }
        }
        out.push(row);
    }
    out
}

/// Closed forms for the aliased four-state task as a function of
/// p = pi(up | shared observation).
#[derive(Debug, Clone, Copy)]
pub struct AliasedClosedForm {
    pub v1: f64,
    pub v2: f64,
    pub v3: f64,
    /// q(phi, up): occupancy-weighted q over the three aliased states.
    pub q_up: f64,
    pub q_down: f64,
    /// Occupancy-weighted state value at the shared observation.
    pub v_phi: f64,
    /// dJ/dp = d v(state 1)/dp.
    pub dv1_dp: f64,
}

/// Argmax of J(p) = -4p^2 + 5p - 1 on the aliased task.
pub const ALIASED_OPTIMAL_P: f64 = 0.625;
/// J at the optimum: 9/16.
pub const ALIASED_OPTIMAL_J: f64 = 0.5625;

pub fn aliased_closed_form(p: f64) -> Result<AliasedClosedForm, OracleError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(OracleError::POutOfRange(p));
    }
    Ok(AliasedClosedForm {
        v1: -4.0 * p * p + 5.0 * p - 1.0,
        v2: -2.0 * p + 1.0,
        v3: 2.0 * p - 1.0,
        q_up: -2.0 * p + 1.5,
        q_down: 2.0 * p - 1.0,
        v_phi: -4.0 * p * p + 4.5 * p - 1.0,
        dv1_dp: -8.0 * p + 5.0,
    })
}

/// Deterministic greedy policy against the evaluation's q, ties broken toward
/// the lowest action index.
pub fn greedy_improve(mdp: &TabularMDP, eval: &ExactEvaluation) -> Vec<Vec<f64>> {
    (0..mdp.num_states())
        .map(|s| {
            let row = &eval.q[s];
            let best = row
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
                    if x > bv {
                        (i, x)
                    } else {
                        (bi, bv)
                    }
                })
                .0;
            let mut out = vec![0.0; mdp.num_actions()];
            out[best] = 1.0;
            out
        })
        .collect()
}

/// Performance-difference lemma: J(pi_new) - J(pi_prior) computed as
/// sum_s eta_new(s) sum_a pi_new(a|s) adv_prior(s, a), where eta_new is the
/// expected discounted visit count under pi_new (so the usual 1/(1-gamma)
/// prefactor is folded into eta; the identity also covers the episodic
/// discount-1 case).
pub fn performance_difference(
    mdp: &TabularMDP,
    pi_new: &[Vec<f64>],
    pi_prior: &[Vec<f64>],
) -> Result<f64, OracleError> {
    let prior = evaluate(mdp, pi_prior)?;
    let new = evaluate(mdp, pi_new)?;
    Ok((0..mdp.num_states())
        .map(|s| {
            let inner: f64 = (0..mdp.num_actions())
                .map(|a| pi_new[s][a] * (prior.q[s][a] - prior.v[s]))
                .sum();
            new.occupancy[s] * inner
        })
        .sum())
}

#[derive(Debug, Clone, Copy)]
pub struct TrpoBound {
    /// Surrogate objective: prior-visitation-weighted total advantage of pi_new.
    pub total_advantage: f64,
    /// alpha = max_s TV(pi_new(.|s), pi_prior(.|s)).
    pub alpha: f64,
    /// epsilon = max_{s,a} |adv_prior(s, a)|.
    pub eps_max: f64,
    /// Penalty 4 alpha^2 gamma eps / (1 - gamma)^2.
    pub penalty: f64,
    /// total_advantage - penalty; J(pi_new) - J(pi_prior) is never below this.
    pub bound: f64,
    /// The exact improvement, for reporting.
    pub actual: f64,
}

/// Trust-region lower bound on policy improvement.
pub fn trpo_lower_bound(
    mdp: &TabularMDP,
    pi_new: &[Vec<f64>],
    pi_prior: &[Vec<f64>],
) -> Result<TrpoBound, OracleError> {
    let gamma = mdp.discount();
    if gamma >= 1.0 {
        return Err(OracleError::BoundNeedsDiscount(gamma));
    }
    let prior = evaluate(mdp, pi_prior)?;
    let new = evaluate(mdp, pi_new)?;
    let n = mdp.num_states();
    let total_advantage: f64 = (0..n)
        .map(|s| {
            let inner: f64 = (0..mdp.num_actions())
                .map(|a| pi_new[s][a] * (prior.q[s][a] - prior.v[s]))
                .sum();
            prior.occupancy[s] * inner
        })
        .sum();
    let alpha = (0..n)
        .map(|s| {
            0.5 * (0..mdp.num_actions())
                .map(|a| (pi_new[s][a] - pi_prior[s][a]).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let eps_max = (0..n)
        .flat_map(|s| (0..mdp.num_actions()).map(move |a| (s, a)))
        .map(|(s, a)| (prior.q[s][a] - prior.v[s]).abs())
        .fold(0.0, f64::max);
    let penalty = 4.0 * alpha * alpha * gamma * eps_max / ((1.0 - gamma) * (1.0 - gamma));
    Ok(TrpoBound {
        total_advantage,
        alpha,
        eps_max,
        penalty,
        bound: total_advantage - penalty,
        actual: new.j - prior.j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{aliased_mdp, random_mdp, sample_episode, MdpSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn aliased_policy(p: f64) -> Vec<Vec<f64>> {
        vec![vec![p, 1.0 - p]; 4]
    }

    #[test]
    fn closed_forms_match_exact_evaluation() {
        let mdp = aliased_mdp();
        for &p in &[0.0, 0.1, 0.25, 0.5, 0.625, 0.8, 1.0] {
            let cf = aliased_closed_form(p).unwrap();
            let eval = evaluate(&mdp, &aliased_policy(p)).unwrap();
            assert!((eval.v[0] - cf.v1).abs() < 1e-12, "v1 at p={p}");
            assert!((eval.v[1] - cf.v2).abs() < 1e-12, "v2 at p={p}");
            assert!((eval.v[2] - cf.v3).abs() < 1e-12, "v3 at p={p}");
            let qo = obs_q(&mdp, &eval);
            assert!((qo[0][0] - cf.q_up).abs() < 1e-12, "q(phi,up) at p={p}");
            assert!((qo[0][1] - cf.q_down).abs() < 1e-12, "q(phi,down) at p={p}");
            let vo = obs_v(&mdp, &eval);
            assert!((vo[0] - cf.v_phi).abs() < 1e-12, "v_phi at p={p}");
        }
    }

    #[test]
    fn closed_form_spot_values() {
        // Frozen values, each recomputed from the closed forms directly.
        let at = |p: f64| aliased_closed_form(p).unwrap();
        assert_eq!(at(0.625).v1, 0.5625, "v1(5/8) = 9/16");
        assert_eq!(at(1.0).v1, 0.0);
        assert_eq!(at(0.0).v1, -1.0);
        assert_eq!(at(0.5).q_up, 0.5);
        assert_eq!(at(0.5).q_down, 0.0);
        assert_eq!(at(0.0).q_up, 1.5);
        assert!((at(0.625).q_up - 0.25).abs() < 1e-15);
        assert!((at(0.625).q_down - 0.25).abs() < 1e-15);
        assert_eq!(at(0.625).v_phi, 0.25, "v_phi(5/8) = 1/4 from -4p^2 + 4.5p - 1");
        assert_eq!(at(0.625).v2, -0.25);
        assert_eq!(at(0.625).dv1_dp, 0.0, "p = 5/8 is the stationary point");
        assert!(aliased_closed_form(1.2).is_err());
    }

    #[test]
    fn q_degeneracy_at_optimum() {
        let mdp = aliased_mdp();
        let eval = evaluate(&mdp, &aliased_policy(ALIASED_OPTIMAL_P)).unwrap();
        let qo = obs_q(&mdp, &eval);
        assert!(
            (qo[0][0] - qo[0][1]).abs() < 1e-10,
            "aggregated q must be action-independent at p = 5/8: {} vs {}",
            qo[0][0],
            qo[0][1]
        );
        assert!((eval.j - ALIASED_OPTIMAL_J).abs() < 1e-12);
    }

    #[test]
    fn occupancy_weights_match_aliasing_analysis() {
        let mdp = aliased_mdp();
        let p = 0.3;
        let eval = evaluate(&mdp, &aliased_policy(p)).unwrap();
        // Per-episode visits: state 0 once, state 1 w.p. p, state 2 w.p. 1-p.
        assert!((eval.occupancy[0] - 1.0).abs() < 1e-12);
        assert!((eval.occupancy[1] - p).abs() < 1e-12);
        assert!((eval.occupancy[2] - (1.0 - p)).abs() < 1e-12);
        assert!((eval.d[0] - 0.5).abs() < 1e-12);
        assert!((eval.d[1] - p / 2.0).abs() < 1e-12);
        assert!((eval.d[2] - (1.0 - p) / 2.0).abs() < 1e-12);
        assert_eq!(eval.d[3], 0.0);
        let total: f64 = eval.d.iter().sum();
        assert!((total - 1.0).abs() < 1e-10, "d sums to 1");
    }

    fn random_policy<R: Rng>(states: usize, actions: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..states)
            .map(|_| {
                let raw: Vec<f64> = (0..actions).map(|_| rng.gen::<f64>() + 0.05).collect();
                let sum: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / sum).collect()
            })
            .collect()
    }

    #[test]
    fn bellman_residual_below_1e_10() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..30 {
            let states = 2 + (trial % 7);
            let mdp = random_mdp(states, 2 + (trial % 3), 0.9, &mut rng);
            let policy = random_policy(states, mdp.num_actions(), &mut rng);
            let eval = evaluate(&mdp, &policy).unwrap();
            for s in 0..states {
                let backup: f64 = (0..mdp.num_actions())
                    .map(|a| {
                        policy[s][a]
                            * (0..states)
                                .map(|s2| mdp.p(s, a, s2) * (mdp.r(s, a, s2) + 0.9 * eval.v[s2]))
                                .sum::<f64>()
                    })
                    .sum();
                assert!(
                    (eval.v[s] - backup).abs() < 1e-10,
                    "Bellman residual {} at state {s}, trial {trial}",
                    (eval.v[s] - backup).abs()
                );
            }
        }
    }

    #[test]
    fn occupancy_matches_power_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..10 {
            let states = 3 + (trial % 5);
            let mdp = random_mdp(states, 2, 0.9, &mut rng);
            let policy = random_policy(states, 2, &mut rng);
            let eval = evaluate(&mdp, &policy).unwrap();
            // Independent route: truncated power series of mu^T (gamma P)^t.
            let mut dist: Vec<f64> = mdp.initial().to_vec();
            let mut series = vec![0.0; states];
            let mut weight = 1.0;
            for _ in 0..2000 {
                for s in 0..states {
                    series[s] += weight * dist[s];
                }
                let mut next = vec![0.0; states];
                for s in 0..states {
                    for s2 in 0..states {
                        let p: f64 =
                            (0..2).map(|a| policy[s][a] * mdp.p(s, a, s2)).sum();
                        next[s2] += dist[s] * p;
                    }
                }
                dist = next;
                weight *= 0.9;
            }
            for s in 0..states {
                assert!(
                    (eval.occupancy[s] - series[s]).abs() < 1e-10,
                    "occupancy mismatch at state {s}: {} vs {}",
                    eval.occupancy[s],
                    series[s]
                );
            }
            let dsum: f64 = eval.d.iter().sum();
            assert!((dsum - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn iterative_path_used_above_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let states = EXACT_SOLVE_MAX_STATES + 20;
        let mdp = random_mdp(states, 2, 0.8, &mut rng);
        let policy = random_policy(states, 2, &mut rng);
        let eval = evaluate(&mdp, &policy).unwrap();
        for s in (0..states).step_by(37) {
            let backup: f64 = (0..2)
                .map(|a| {
                    policy[s][a]
                        * (0..states)
                            .map(|s2| mdp.p(s, a, s2) * (mdp.r(s, a, s2) + 0.8 * eval.v[s2]))
                            .sum::<f64>()
                })
                .sum();
            assert!((eval.v[s] - backup).abs() < 1e-10, "residual at state {s}");
        }
    }

    #[test]
    fn improper_episodic_mdp_is_rejected() {
        // Discount 1 with an unreachable terminal state: the non-terminal block
        // is stochastic, so I - P is singular.
        let mdp = MdpSpec {
            num_states: 3,
            num_actions: 1,
            discount: 1.0,
            initial: vec![1.0, 0.0, 0.0],
            terminal: vec![false, false, true],
            obs_map: vec![0, 1, 2],
            transitions: vec![(0, 0, 1, 1.0, 0.0), (1, 0, 0, 1.0, 0.0)],
        }
        .build()
        .unwrap();
        let err = evaluate(&mdp, &vec![vec![1.0]; 3]).unwrap_err();
        assert!(matches!(err, OracleError::Singular), "{err}");
    }

    #[test]
    fn lemma_matches_direct_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..40 {
            let states = 2 + (trial % 7);
            let actions = 2 + (trial % 2);
            let mdp = random_mdp(states, actions, 0.9, &mut rng);
            let pi_a = random_policy(states, actions, &mut rng);
            let pi_b = random_policy(states, actions, &mut rng);
            let direct =
                evaluate(&mdp, &pi_a).unwrap().j - evaluate(&mdp, &pi_b).unwrap().j;
            let lemma = performance_difference(&mdp, &pi_a, &pi_b).unwrap();
            assert!(
                (direct - lemma).abs() < 1e-8,
                "lemma mismatch {direct} vs {lemma} on trial {trial}"
            );
        }
    }

    #[test]
    fn lemma_holds_on_episodic_aliased_task() {
        let mdp = aliased_mdp();
        for &(p_new, p_old) in &[(0.625, 0.5), (0.9, 0.2), (0.1, 0.7)] {
            let direct = aliased_closed_form(p_new).unwrap().v1
                - aliased_closed_form(p_old).unwrap().v1;
            let lemma =
                performance_difference(&mdp, &aliased_policy(p_new), &aliased_policy(p_old))
                    .unwrap();
            assert!((direct - lemma).abs() < 1e-10, "{direct} vs {lemma}");
        }
    }

    #[test]
    fn frozen_j_difference_from_half_to_optimum() {
        // J(0.625) - J(0.5) evaluated from the closed form: 9/16 - 1/2 = 1/16.
        let d = aliased_closed_form(0.625).unwrap().v1 - aliased_closed_form(0.5).unwrap().v1;
        assert!((d - 0.0625).abs() < 1e-15);
        let lemma = performance_difference(
            &aliased_mdp(),
            &aliased_policy(0.625),
            &aliased_policy(0.5),
        )
        .unwrap();
        assert!((lemma - 0.0625).abs() < 1e-10);
    }

    #[test]
    fn greedy_improvement_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..30 {
            let states = 2 + (trial % 6);
            let mdp = random_mdp(states, 3, 0.9, &mut rng);
            let policy = random_policy(states, 3, &mut rng);
            let eval = evaluate(&mdp, &policy).unwrap();
            let greedy = greedy_improve(&mdp, &eval);
            let improved = evaluate(&mdp, &greedy).unwrap();
            for s in 0..states {
                assert!(
                    improved.v[s] >= eval.v[s] - 1e-10,
                    "greedy made state {s} worse: {} -> {}",
                    eval.v[s],
                    improved.v[s]
                );
            }
        }
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_action() {
        let mdp = aliased_mdp();
        let eval = evaluate(&mdp, &aliased_policy(0.4)).unwrap();
        // Terminal state q is identically 0 for both actions.
        let greedy = greedy_improve(&mdp, &eval);
        assert_eq!(greedy[3], vec![1.0, 0.0]);
    }

    #[test]
    fn trpo_bound_never_violated() {
        let mut rng = ChaCha8Rng::seed_from_u64(31337);
        for trial in 0..40 {
            let states = 2 + (trial % 7);
            let mdp = random_mdp(states, 2, 0.9, &mut rng);
            let pi_a = random_policy(states, 2, &mut rng);
            let pi_b = random_policy(states, 2, &mut rng);
            let report = trpo_lower_bound(&mdp, &pi_a, &pi_b).unwrap();
            assert!(
                report.actual >= report.bound - 1e-12,
                "bound violated on trial {trial}: actual {} < bound {}",
                report.actual,
                report.bound
            );
        }
    }

    #[test]
    fn trpo_bound_tight_when_policies_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = random_mdp(5, 2, 0.9, &mut rng);
        let pi = random_policy(5, 2, &mut rng);
        let report = trpo_lower_bound(&mdp, &pi, &pi).unwrap();
        assert!(report.alpha.abs() < 1e-15);
        assert!(report.penalty.abs() < 1e-15);
        assert!(report.actual.abs() < 1e-12 && report.bound.abs() < 1e-12);
    }

    #[test]
    fn trpo_bound_rejects_discount_one() {
        let mdp = aliased_mdp();
        let err = trpo_lower_bound(&mdp, &aliased_policy(0.5), &aliased_policy(0.5)).unwrap_err();
        assert!(matches!(err, OracleError::BoundNeedsDiscount(_)));
    }

    #[test]
    fn empirical_visitation_matches_d_on_aliased_task() {
        let mdp = aliased_mdp();
        let p = 0.3;
        let eval = evaluate(&mdp, &aliased_policy(p)).unwrap();
        let policy = vec![vec![p, 1.0 - p], vec![0.5, 0.5]];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000usize;
        let mut counts = vec![0.0f64; 4];
        let mut total = 0.0;
        for _ in 0..n {
            let traj = sample_episode(&mdp, &policy, 1000, &mut rng).unwrap();
            for step in &traj.steps {
                counts[step.state] += 1.0;
                total += 1.0;
            }
        }
        // Visit share of state 1 is Bernoulli(p)/2 per episode.
        let se = (p * (1.0 - p) / n as f64).sqrt() / 2.0;
        for s in 0..3 {
            let freq = counts[s] / total;
            let tol = (3.0 * se).max(1e-9);
            assert!(
                (freq - eval.d[s]).abs() <= tol,
                "state {s}: empirical {freq} vs oracle {} (3-sigma {tol})",
                eval.d[s]
            );
        }
    }

    #[test]
    fn empirical_discounted_visitation_matches_d() {
        let mut build_rng = ChaCha8Rng::seed_from_u64(12);
        let mdp = random_mdp(5, 2, 0.9, &mut build_rng);
        let policy = random_policy(5, 2, &mut build_rng);
        let eval = evaluate(&mdp, &policy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let episodes = 20_000usize;
        let horizon = 250; // gamma^250 ~ 3.6e-12, truncation bias far below noise
        let mut sums = vec![0.0f64; 5];
        let mut sq = vec![0.0f64; 5];
        for _ in 0..episodes {
            let traj = sample_episode(&mdp, &policy, horizon, &mut rng).unwrap();
            let mut per = vec![0.0f64; 5];
            let mut w = 1.0 - 0.9; // (1 - gamma) gamma^t weights
            for step in &traj.steps {
                per[step.state] += w;
                w *= 0.9;
            }
            for s in 0..5 {
                sums[s] += per[s];
                sq[s] += per[s] * per[s];
            }
        }
        for s in 0..5 {
            let mean = sums[s] / episodes as f64;
            let var = sq[s] / episodes as f64 - mean * mean;
            let se = (var / episodes as f64).sqrt();
            assert!(
                (mean - eval.d[s]).abs() <= 3.0 * se + 1e-9,
                "state {s}: empirical {mean} vs oracle {} (se {se})",
                eval.d[s]
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(25))]
        #[test]
        fn lemma_and_bound_property(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let states = 2 + (seed as usize % 7);
            let mdp = random_mdp(states, 2, 0.9, &mut rng);
            let pi_a = random_policy(states, 2, &mut rng);
            let pi_b = random_policy(states, 2, &mut rng);
            let direct = evaluate(&mdp, &pi_a).unwrap().j - evaluate(&mdp, &pi_b).unwrap().j;
            let lemma = performance_difference(&mdp, &pi_a, &pi_b).unwrap();
            prop_assert!((direct - lemma).abs() < 1e-8);
            let report = trpo_lower_bound(&mdp, &pi_a, &pi_b).unwrap();
            prop_assert!(report.actual >= report.bound - 1e-12);
        }
    }
}
