//! Exact finite tabular instantiation of the KL-regularized multi-turn MDP.
//!
//! The objective being solved is
//!
//! ```text
//! max_pi  E[ u*(tau) ] - eta * sum_h E[ KL(pi(.|s^h) || pi_ref(.|s^h)) ]
//! ```
//!
//! States encode the interaction history, so transitions are deterministic
//! and the reachable state space forms a forest rooted at the initial
//! distribution. Each state carries its reference distribution; each action
//! either transitions to a child state or terminates with the trajectory
//! reward. [`solve`](solve::solve) runs the backward soft-value recursion,
//! [`brute_force`](brute::brute_force) is the enumeration oracle, and
//! [`probe`] builds self-correction instances including the reward-hacking
//! probe.

pub mod brute;
pub mod probe;
pub mod solve;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyTable;

pub use brute::{brute_force, BruteForceResult, GRID_POINT_CAP};
pub use probe::{
    build_self_correction_mdp, hacking_probe, random_two_turn_mdp, ControlMode, HackingReport,
    ProbeConfig, RewardDesign, ScRefParams,
};
pub use solve::{evaluate_objective, solve, SolveResult};

/// Probability mass bookkeeping tolerance.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-12;

/// Where an action leads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    /// Deterministic transition to a child state (arena index).
    Next(usize),
    /// Trajectory ends with this reward.
    Terminal(f64),
}

/// One joint action (attempt and/or verdict choice) available in a state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionEdge {
    pub name: String,
    /// Reference policy probability; strictly positive.
    pub ref_prob: f64,
    pub outcome: Outcome,
}

/// A state in the unrolled history tree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateNode {
    pub name: String,
    /// Turn index (1-based) this state belongs to.
    pub step: usize,
    pub actions: Vec<ActionEdge>,
}

/// Finite-horizon tabular MDP with deterministic transitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularMdp {
    pub states: Vec<StateNode>,
    /// Initial distribution over root states.
    pub roots: Vec<(usize, f64)>,
    pub horizon: usize,
}

impl TabularMdp {
    /// Validates structure: distributions sum to one, reference probabilities
    /// are strictly positive, transitions form a forest (each state has at
    /// most one parent, every non-root is reachable), and depth respects the
    /// horizon.
    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::InvalidMdp("no states".into()));
        }
        let root_mass: f64 = self.roots.iter().map(|(_, p)| p).sum();
        if (root_mass - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidMdp(format!(
                "root distribution sums to {root_mass}, expected 1"
            )));
        }
        for (idx, p) in &self.roots {
            if *idx >= self.states.len() {
                return Err(Error::InvalidMdp(format!("root index {idx} out of range")));
            }
            if *p < 0.0 {
                return Err(Error::InvalidMdp(format!("negative root mass {p}")));
            }
        }
        let mut parent = vec![None::<usize>; self.states.len()];
        for (idx, state) in self.states.iter().enumerate() {
            if state.actions.is_empty() {
                return Err(Error::InvalidMdp(format!(
                    "state {:?} has no actions",
                    state.name
                )));
            }
            let mass: f64 = state.actions.iter().map(|a| a.ref_prob).sum();
            if (mass - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                return Err(Error::InvalidMdp(format!(
                    "reference distribution at {:?} sums to {mass}",
                    state.name
                )));
            }
            for action in &state.actions {
                if action.ref_prob <= 0.0 {
                    return Err(Error::InvalidMdp(format!(
                        "non-positive reference probability for {:?} in {:?}",
                        action.name, state.name
                    )));
                }
                if let Outcome::Next(child) = action.outcome {
                    if child >= self.states.len() {
                        return Err(Error::InvalidMdp(format!(
                            "transition to unknown state {child} from {:?}",
                            state.name
                        )));
                    }
                    if parent[child].is_some() {
                        return Err(Error::InvalidMdp(format!(
                            "state {} has two parents",
                            self.states[child].name
                        )));
                    }
                    // The step field orders the backward recursion; a child
                    // must sit exactly one turn deeper than its parent.
                    if self.states[child].step != state.step + 1 {
                        return Err(Error::InvalidMdp(format!(
                            "transition from {:?} (step {}) to {:?} (step {}) skips steps",
                            state.name,
                            state.step,
                            self.states[child].name,
                            self.states[child].step
                        )));
                    }
                    parent[child] = Some(idx);
                }
            }
        }
        // Reachability within the horizon.
        let mut depth = vec![None::<usize>; self.states.len()];
        let mut stack: Vec<(usize, usize)> = self.roots.iter().map(|&(i, _)| (i, 1)).collect();
        while let Some((idx, d)) = stack.pop() {
            if d > self.horizon {
                return Err(Error::InvalidMdp(format!(
                    "state {:?} at depth {d} exceeds horizon {}",
                    self.states[idx].name, self.horizon
                )));
            }
            depth[idx] = Some(d);
            for action in &self.states[idx].actions {
                if let Outcome::Next(child) = action.outcome {
                    stack.push((child, d + 1));
                }
            }
        }
        if let Some(unreachable) = depth.iter().position(|d| d.is_none()) {
            return Err(Error::InvalidMdp(format!(
                "state {:?} is unreachable",
                self.states[unreachable].name
            )));
        }
        Ok(())
    }

    /// Per-state action arities, for building aligned policy tables.
    pub fn arities(&self) -> Vec<usize> {
        self.states.iter().map(|s| s.actions.len()).collect()
    }

    /// The reference policy as a table aligned with this MDP.
    pub fn reference_policy(&self) -> PolicyTable {
        PolicyTable::from_probabilities(
            &self
                .states
                .iter()
                .map(|s| s.actions.iter().map(|a| a.ref_prob).collect())
                .collect::<Vec<_>>(),
        )
    }

    /// Adds `c` to every terminal reward.
    pub fn shift_rewards(&self, c: f64) -> TabularMdp {
        let mut shifted = self.clone();
        for state in &mut shifted.states {
            for action in &mut state.actions {
                if let Outcome::Terminal(r) = &mut action.outcome {
                    *r += c;
                }
            }
        }
        shifted
    }

    pub fn state_index(&self, name: &str) -> Option<usize> {
        self.states.iter().position(|s| s.name == name)
    }
}

/// Declarative on-disk form of an MDP instance (states, reference
/// probabilities, rewards), loadable via [`TabularMdp::from_spec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpSpec {
    pub horizon: usize,
    pub roots: Vec<RootSpec>,
    pub states: Vec<StateSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootSpec {
    pub state: String,
    pub prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    pub name: String,
    pub step: usize,
    pub actions: Vec<ActionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    pub name: String,
    pub ref_prob: f64,
    /// Name of the next state; mutually exclusive with `reward`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

impl TabularMdp {
    pub fn from_spec(spec: &MdpSpec) -> Result<TabularMdp> {
        let index_of = |name: &str| -> Result<usize> {
            spec.states
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| Error::InvalidMdp(format!("unknown state {name:?}")))
        };
        let mut states = Vec::with_capacity(spec.states.len());
        for s in &spec.states {
            let mut actions = Vec::with_capacity(s.actions.len());
            for a in &s.actions {
                let outcome = match (&a.next, a.reward) {
                    (Some(next), None) => Outcome::Next(index_of(next)?),
                    (None, Some(reward)) => Outcome::Terminal(reward),
                    _ => {
                        return Err(Error::InvalidMdp(format!(
                            "action {:?} in {:?} must have exactly one of next/reward",
                            a.name, s.name
                        )))
                    }
                };
                actions.push(ActionEdge {
                    name: a.name.clone(),
                    ref_prob: a.ref_prob,
                    outcome,
                });
            }
            states.push(StateNode {
                name: s.name.clone(),
                step: s.step,
                actions,
            });
        }
        let roots = spec
            .roots
            .iter()
            .map(|r| Ok((index_of(&r.state)?, r.prob)))
            .collect::<Result<Vec<_>>>()?;
        let mdp = TabularMdp {
            states,
            roots,
            horizon: spec.horizon,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn load_spec_file<P: AsRef<std::path::Path>>(path: P) -> Result<TabularMdp> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let spec: MdpSpec = serde_json::from_str(&text).map_err(|e| Error::Schema {
            line: e.line(),
            message: e.to_string(),
        })?;
        TabularMdp::from_spec(&spec)
    }
}

/// The two-action bandit used throughout the tests: rewards (1, 0) with a
/// configurable reference.
pub fn bandit(ref_good: f64, reward_good: f64, reward_bad: f64) -> TabularMdp {
    TabularMdp {
        states: vec![StateNode {
            name: "x".into(),
            step: 1,
            actions: vec![
                ActionEdge {
                    name: "good".into(),
                    ref_prob: ref_good,
                    outcome: Outcome::Terminal(reward_good),
                },
                ActionEdge {
                    name: "bad".into(),
                    ref_prob: 1.0 - ref_good,
                    outcome: Outcome::Terminal(reward_bad),
                },
            ],
        }],
        roots: vec![(0, 1.0)],
        horizon: 1,
    }
}
