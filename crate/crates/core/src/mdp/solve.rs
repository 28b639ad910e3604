//! Backward soft-value recursion and exact objective evaluation.
//!
//! The optimality conditions for the KL-regularized objective are
//!
//! ```text
//! Q(s, a) = u*            if a terminates
//!         = V(child(s,a)) otherwise
//! V(s)    = eta * log sum_a ref(a|s) * exp(Q(s, a) / eta)
//! pi*(a|s) proportional to ref(a|s) * exp(Q(s, a) / eta)
//! ```
//!
//! All value computations run in log space with a log-sum-exp shift, so
//! small eta (large Q/eta) does not overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{kl_divergence, log_sum_exp, PolicyTable};

use super::{Outcome, TabularMdp};

/// Output of the backward recursion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    /// Q value per (state, action), aligned with the MDP arena.
    pub q_star: Vec<Vec<f64>>,
    /// Soft value per state.
    pub v_star: Vec<f64>,
    /// Optimal policy, stored as logits log(ref) + Q/eta.
    pub pi_star: PolicyTable,
    pub eta: f64,
    /// The objective value of pi_star: initial-distribution average of v_star.
    pub objective: f64,
}

/// Solves the KL-regularized MDP exactly by backward recursion.
pub fn solve(mdp: &TabularMdp, eta: f64) -> Result<SolveResult> {
    if eta <= 0.0 || !eta.is_finite() {
        return Err(Error::InvalidEta(eta));
    }
    mdp.validate()?;

    let n = mdp.states.len();
    let mut q_star: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut v_star: Vec<f64> = vec![f64::NAN; n];
    let mut logits: Vec<Vec<f64>> = vec![Vec::new(); n];

    // Children appear after computing their own values: process states in
    // decreasing step order (leaves of the forest are at the deepest steps).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(mdp.states[i].step));

    for idx in order {
        let state = &mdp.states[idx];
        let q: Vec<f64> = state
            .actions
            .iter()
            .map(|action| match action.outcome {
                Outcome::Terminal(u) => u,
                Outcome::Next(child) => {
                    debug_assert!(!v_star[child].is_nan(), "child value computed first");
                    v_star[child]
                }
            })
            .collect();
        let row: Vec<f64> = state
            .actions
            .iter()
            .zip(q.iter())
            .map(|(action, qa)| action.ref_prob.ln() + qa / eta)
            .collect();
        v_star[idx] = eta * log_sum_exp(&row);
        q_star[idx] = q;
        logits[idx] = row;
    }

    let pi_star = PolicyTable::new(logits);
    let objective = mdp.roots.iter().map(|&(i, p)| p * v_star[i]).sum();
    Ok(SolveResult {
        q_star,
        v_star,
        pi_star,
        eta,
        objective,
    })
}

/// Exact value of a policy: expected terminal reward minus eta times the
/// accumulated KL to the reference, enumerated over the whole history tree.
pub fn evaluate_objective(mdp: &TabularMdp, policy: &PolicyTable, eta: f64) -> Result<f64> {
    if eta <= 0.0 || !eta.is_finite() {
        return Err(Error::InvalidEta(eta));
    }
    let mut value = 0.0;
    for &(root, mass) in &mdp.roots {
        if mass > 0.0 {
            value += mass * state_value(mdp, policy, eta, root)?;
        }
    }
    Ok(value)
}

fn state_value(mdp: &TabularMdp, policy: &PolicyTable, eta: f64, idx: usize) -> Result<f64> {
    let state = &mdp.states[idx];
    let probs = policy.probabilities(idx).map_err(|_| Error::MissingPolicyEntry {
        state: state.name.clone(),
    })?;
    if probs.len() != state.actions.len() {
        return Err(Error::MissingPolicyEntry {
            state: state.name.clone(),
        });
    }
    let ref_probs: Vec<f64> = state.actions.iter().map(|a| a.ref_prob).collect();
    let mut value = -eta * kl_divergence(&probs, &ref_probs);
    for (action, &p) in state.actions.iter().zip(probs.iter()) {
        if p == 0.0 {
            continue;
        }
        value += p * match action.outcome {
            Outcome::Terminal(u) => u,
            Outcome::Next(child) => state_value(mdp, policy, eta, child)?,
        };
    }
    Ok(value)
}

/// Policy-aggregate KL: sum over turns of the expected per-state KL to the
/// reference under the policy's own visitation distribution.
pub fn trajectory_kl(mdp: &TabularMdp, policy: &PolicyTable, reference: &PolicyTable) -> Result<f64> {
    let mut total = 0.0;
    let mut stack: Vec<(usize, f64)> = mdp.roots.clone();
    while let Some((idx, mass)) = stack.pop() {
        if mass == 0.0 {
            continue;
        }
        let probs = policy.probabilities(idx)?;
        total += mass * policy.kl_to(reference, idx)?;
        for (action, &p) in mdp.states[idx].actions.iter().zip(probs.iter()) {
            if let Outcome::Next(child) = action.outcome {
                stack.push((child, mass * p));
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{bandit, probe::random_two_turn_mdp};
    use crate::rng::RngFactory;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn bandit_optimum_matches_closed_form() {
        let mdp = bandit(0.5, 1.0, 0.0);
        let result = solve(&mdp, 1.0).unwrap();
        let p = result.pi_star.probabilities(0).unwrap();
        assert!((p[0] - E / (1.0 + E)).abs() < 1e-12, "pi_star(good)={}", p[0]);
        assert!((result.objective - (0.5 * (E + 1.0)).ln()).abs() < 1e-12);

        // Near-greedy at small eta.
        let result = solve(&mdp, 0.01).unwrap();
        let p = result.pi_star.probabilities(0).unwrap();
        assert!(p[0] >= 0.999);
    }

    #[test]
    fn bandit_pi_star_dominates_every_fine_grid_policy() {
        // Full enumeration of Bernoulli policies at 1e-4 resolution; the
        // solved policy's exact objective tops every one of them.
        let mdp = bandit(0.5, 1.0, 0.0);
        let solved = solve(&mdp, 1.0).unwrap();
        let mut best_grid = f64::NEG_INFINITY;
        for i in 0..=10_000 {
            let p = i as f64 / 10_000.0;
            let policy = PolicyTable::from_probabilities(&[vec![p, 1.0 - p]]);
            let v = evaluate_objective(&mdp, &policy, 1.0).unwrap();
            assert!(v <= solved.objective + 1e-12, "grid p={p} beat pi_star");
            best_grid = best_grid.max(v);
        }
        assert!(solved.objective - best_grid < 1e-7);
    }

    #[test]
    fn three_step_chain_matches_nested_soft_values() {
        use crate::mdp::{ActionEdge, StateNode};
        let eta = 0.3;
        let mdp = TabularMdp {
            states: vec![
                StateNode {
                    name: "x".into(),
                    step: 1,
                    actions: vec![
                        ActionEdge {
                            name: "stop".into(),
                            ref_prob: 0.5,
                            outcome: Outcome::Terminal(0.2),
                        },
                        ActionEdge {
                            name: "go".into(),
                            ref_prob: 0.5,
                            outcome: Outcome::Next(1),
                        },
                    ],
                },
                StateNode {
                    name: "y".into(),
                    step: 2,
                    actions: vec![
                        ActionEdge {
                            name: "stop".into(),
                            ref_prob: 0.4,
                            outcome: Outcome::Terminal(0.3),
                        },
                        ActionEdge {
                            name: "go".into(),
                            ref_prob: 0.6,
                            outcome: Outcome::Next(2),
                        },
                    ],
                },
                StateNode {
                    name: "z".into(),
                    step: 3,
                    actions: vec![
                        ActionEdge {
                            name: "a".into(),
                            ref_prob: 0.5,
                            outcome: Outcome::Terminal(1.0),
                        },
                        ActionEdge {
                            name: "b".into(),
                            ref_prob: 0.5,
                            outcome: Outcome::Terminal(0.0),
                        },
                    ],
                },
            ],
            roots: vec![(0, 1.0)],
            horizon: 3,
        };
        let solved = solve(&mdp, eta).unwrap();
        let v_z = eta * (0.5 * (1.0f64 / eta).exp() + 0.5).ln();
        let v_y = eta * (0.4 * (0.3f64 / eta).exp() + 0.6 * (v_z / eta).exp()).ln();
        let v_x = eta * (0.5 * (0.2f64 / eta).exp() + 0.5 * (v_y / eta).exp()).ln();
        assert!((solved.v_star[2] - v_z).abs() < 1e-12);
        assert!((solved.v_star[1] - v_y).abs() < 1e-12);
        assert!((solved.objective - v_x).abs() < 1e-12);

        let brute = crate::mdp::brute_force(&mdp, eta, 1e-3).unwrap();
        assert!(solved.objective - brute.objective < 1e-6);
        assert!(brute.objective <= solved.objective + 1e-9);
    }

    #[test]
    fn identical_rewards_leave_the_reference_optimal() {
        let mdp = bandit(0.3, 0.7, 0.7);
        let result = solve(&mdp, 0.5).unwrap();
        let p = result.pi_star.probabilities(0).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-12);
        assert!((p[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_objective_is_zero_at_reference() {
        let mdp = bandit(0.4, 0.0, 0.0);
        let reference = mdp.reference_policy();
        let value = evaluate_objective(&mdp, &reference, 1.0).unwrap();
        assert!(value.abs() < 1e-12);
        let solved = solve(&mdp, 1.0).unwrap();
        assert!(solved.objective.abs() < 1e-12);
    }

    #[test]
    fn reference_policy_value_is_expected_reward() {
        let mdp = bandit(0.25, 2.0, -1.0);
        let reference = mdp.reference_policy();
        let value = evaluate_objective(&mdp, &reference, 0.3).unwrap();
        assert!((value - (0.25 * 2.0 - 0.75)).abs() < 1e-12);
    }

    #[test]
    fn invalid_eta_is_rejected() {
        let mdp = bandit(0.5, 1.0, 0.0);
        assert!(matches!(solve(&mdp, 0.0), Err(Error::InvalidEta(_))));
        assert!(matches!(solve(&mdp, -1.0), Err(Error::InvalidEta(_))));
        assert!(matches!(
            evaluate_objective(&mdp, &mdp.reference_policy(), f64::NAN),
            Err(Error::InvalidEta(_))
        ));
    }

    #[test]
    fn missing_policy_entries_error() {
        let mdp = bandit(0.5, 1.0, 0.0);
        let policy = PolicyTable::new(vec![]);
        assert!(matches!(
            evaluate_objective(&mdp, &policy, 1.0),
            Err(Error::MissingPolicyEntry { .. })
        ));
    }

    #[test]
    fn tiny_eta_stays_finite() {
        let mdp = bandit(0.5, 1000.0, 0.0);
        let result = solve(&mdp, 1e-6).unwrap();
        assert!(result.objective.is_finite());
        assert!(result.v_star.iter().all(|v| v.is_finite()));
        let p = result.pi_star.probabilities(0).unwrap();
        assert!(p[0] > 0.999999);
    }

    #[test]
    fn solve_consistency_invariants_hold() {
        // v = eta*log E_ref exp(q/eta) and pi* proportional to ref*exp(q/eta),
        // checked on a batch of random instances.
        let factory = RngFactory::new(2024);
        for i in 0..25 {
            let mdp = random_two_turn_mdp(&factory, i);
            for eta in [0.1, 0.5, 1.0] {
                let r = solve(&mdp, eta).unwrap();
                for (s, state) in mdp.states.iter().enumerate() {
                    // Direct (non-shifted) identity is numerically fine at
                    // these reward scales.
                    let direct: f64 = state
                        .actions
                        .iter()
                        .zip(r.q_star[s].iter())
                        .map(|(a, q)| a.ref_prob * (q / eta).exp())
                        .sum();
                    assert!(
                        (r.v_star[s] - eta * direct.ln()).abs() < 1e-10,
                        "v identity failed: {} vs {}",
                        r.v_star[s],
                        eta * direct.ln()
                    );
                    let probs = r.pi_star.probabilities(s).unwrap();
                    for (j, (a, q)) in state.actions.iter().zip(r.q_star[s].iter()).enumerate() {
                        let expected = a.ref_prob * (q / eta).exp() / direct;
                        assert!(
                            (probs[j] - expected).abs() < 1e-10,
                            "pi identity failed at state {s} action {j}"
                        );
                    }
                }
                // V*_1 identity: initial average of v_star equals the exact
                // objective of pi_star.
                let eval = evaluate_objective(&mdp, &r.pi_star, eta).unwrap();
                assert!((eval - r.objective).abs() < 1e-9, "{eval} vs {}", r.objective);
            }
        }
    }

    #[test]
    fn reward_shift_moves_values_not_the_policy() {
        let factory = RngFactory::new(7);
        let mdp = random_two_turn_mdp(&factory, 0);
        let eta = 0.3;
        let base = solve(&mdp, eta).unwrap();
        let shifted = solve(&mdp.shift_rewards(5.0), eta).unwrap();

        // Every state's value moves by exactly the shift times the number of
        // remaining reward opportunities (one terminal per path here), and
        // the policy itself is unchanged.
        for s in 0..mdp.states.len() {
            let p0 = base.pi_star.probabilities(s).unwrap();
            let p1 = shifted.pi_star.probabilities(s).unwrap();
            for (a, b) in p0.iter().zip(p1.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert!((shifted.objective - base.objective - 5.0).abs() < 1e-9);
    }

    #[test]
    fn kl_is_monotone_in_eta() {
        let factory = RngFactory::new(15);
        for i in 0..10 {
            let mdp = random_two_turn_mdp(&factory, i);
            let reference = mdp.reference_policy();
            let mut previous = f64::INFINITY;
            for eta in [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 10.0] {
                let r = solve(&mdp, eta).unwrap();
                let kl = trajectory_kl(&mdp, &r.pi_star, &reference).unwrap();
                assert!(
                    kl <= previous + 1e-9,
                    "KL increased from {previous} to {kl} at eta={eta}"
                );
                previous = kl;
            }
        }
    }
}
