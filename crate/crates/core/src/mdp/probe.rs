//! Self-correction MDP instances: reward designs, the hacking probe, and
//! random test instances.
//!
//! The two-turn self-correction loop maps onto the tabular MDP in two ways.
//! Under [`ControlMode::FullControl`] the policy chooses the first attempt's
//! correctness jointly with its verdict, which is the regime where a shaped
//! bonus for wrong-then-corrected trajectories can be gamed: answering wrong
//! on purpose, flagging it, and collecting the bonus on the easy revision.
//! Under [`ControlMode::FrozenFirstAttempt`] the first attempt comes from a
//! frozen sampler and the policy only controls verdicts and revisions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::PolicyTable;
use crate::rng::RngFactory;

use super::solve::solve;
use super::{ActionEdge, Outcome, StateNode, TabularMdp};

/// Trajectory reward as a function of (first attempt correct, final correct).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardDesign {
    /// u* = 1 iff the final answer is correct.
    CorrectnessOnly,
    /// `bonus` iff the first attempt was wrong and the final answer correct,
    /// otherwise `base` for a correct final answer and 0 for a wrong one.
    ShapedWrongThenCorrect { bonus: f64, base: f64 },
}

impl RewardDesign {
    pub fn reward(&self, first_correct: bool, final_correct: bool) -> f64 {
        match *self {
            RewardDesign::CorrectnessOnly => {
                if final_correct {
                    1.0
                } else {
                    0.0
                }
            }
            RewardDesign::ShapedWrongThenCorrect { bonus, base } => {
                if final_correct {
                    if first_correct {
                        base
                    } else {
                        bonus
                    }
                } else {
                    0.0
                }
            }
        }
    }
}

/// Who chooses the first attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    /// The optimized policy picks (first attempt, verdict) jointly.
    FullControl,
    /// The first attempt is drawn from the frozen reference sampler; the
    /// policy controls verdicts and revisions only.
    FrozenFirstAttempt,
}

/// Reference-policy behavior rates for self-correction MDP instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScRefParams {
    /// Reference probability of a correct first attempt.
    pub p_right: f64,
    /// Reference P[verdict yes | attempt right].
    pub yes_given_right: f64,
    /// Reference P[verdict yes | attempt wrong].
    pub yes_given_wrong: f64,
    /// Reference P[final right | first wrong, told wrong] (the fix rate).
    pub fix_after_wrong: f64,
    /// Reference P[final right | first right, told wrong].
    pub stay_right: f64,
    /// Reference P[second verdict yes | final right].
    pub y2_yes_given_right: f64,
    /// Reference P[second verdict yes | final wrong].
    pub y2_yes_given_wrong: f64,
}

impl Default for ScRefParams {
    fn default() -> Self {
        Self {
            p_right: 0.9,
            yes_given_right: 0.9,
            yes_given_wrong: 0.2,
            fix_after_wrong: 0.8,
            stay_right: 0.7,
            y2_yes_given_right: 0.9,
            y2_yes_given_wrong: 0.2,
        }
    }
}

/// A built self-correction instance, with the (state, action) pairs whose
/// choice commits to a wrong first attempt.
#[derive(Debug, Clone)]
pub struct ScMdp {
    pub mdp: TabularMdp,
    pub first_wrong: Vec<(usize, usize)>,
}

impl ScMdp {
    /// Probability mass the policy places on wrong first attempts, summed
    /// over the initial distribution.
    pub fn first_wrong_probability(&self, policy: &PolicyTable) -> Result<f64> {
        let mut total = 0.0;
        for &(root, mass) in &self.mdp.roots {
            let probs = policy.probabilities(root)?;
            for &(state, action) in &self.first_wrong {
                if state == root {
                    total += mass * probs[action];
                }
            }
        }
        // Frozen mode: wrong first attempts are baked into the roots.
        for &(root, mass) in &self.mdp.roots {
            if self.mdp.states[root].name.ends_with("|wrong") {
                total += mass;
            }
        }
        Ok(total)
    }
}

fn second_turn_state(
    name: String,
    first_correct: bool,
    refs: &ScRefParams,
    design: RewardDesign,
) -> StateNode {
    let p_right = if first_correct {
        refs.stay_right
    } else {
        refs.fix_after_wrong
    };
    let mut actions = Vec::with_capacity(4);
    for (final_correct, answer) in [(true, "right"), (false, "wrong")] {
        let pa = if final_correct { p_right } else { 1.0 - p_right };
        let y_yes = if final_correct {
            refs.y2_yes_given_right
        } else {
            refs.y2_yes_given_wrong
        };
        for (says_yes, verdict) in [(true, "yes"), (false, "no")] {
            let py = if says_yes { y_yes } else { 1.0 - y_yes };
            actions.push(ActionEdge {
                name: format!("{answer}|{verdict}"),
                ref_prob: pa * py,
                outcome: Outcome::Terminal(design.reward(first_correct, final_correct)),
            });
        }
    }
    StateNode {
        name,
        step: 2,
        actions,
    }
}

/// Builds a two-turn self-correction MDP over `n_prompts` equally likely
/// prompts. The revise action lands on the correct answer deterministically
/// (unit correction reliability); the reference rates say how often the
/// reference takes it.
pub fn build_self_correction_mdp(
    n_prompts: usize,
    mode: ControlMode,
    refs: &ScRefParams,
    design: RewardDesign,
) -> Result<ScMdp> {
    let mut states = Vec::new();
    let mut roots = Vec::new();
    let mut first_wrong = Vec::new();
    let d0 = 1.0 / n_prompts as f64;

    for prompt in 0..n_prompts {
        match mode {
            ControlMode::FullControl => {
                let root_idx = states.len();
                roots.push((root_idx, d0));
                states.push(StateNode {
                    name: format!("x{prompt}"),
                    step: 1,
                    actions: Vec::new(),
                });
                let mut actions = Vec::with_capacity(4);
                for (first_correct, answer) in [(true, "right"), (false, "wrong")] {
                    let pa = if first_correct {
                        refs.p_right
                    } else {
                        1.0 - refs.p_right
                    };
                    let y_yes = if first_correct {
                        refs.yes_given_right
                    } else {
                        refs.yes_given_wrong
                    };
                    for (says_yes, verdict) in [(true, "yes"), (false, "no")] {
                        let py = if says_yes { y_yes } else { 1.0 - y_yes };
                        let outcome = if says_yes {
                            Outcome::Terminal(design.reward(first_correct, first_correct))
                        } else {
                            let child_idx = states.len();
                            states.push(second_turn_state(
                                format!("x{prompt}|{answer}|no"),
                                first_correct,
                                refs,
                                design,
                            ));
                            Outcome::Next(child_idx)
                        };
                        if !first_correct {
                            first_wrong.push((root_idx, actions.len()));
                        }
                        actions.push(ActionEdge {
                            name: format!("{answer}|{verdict}"),
                            ref_prob: pa * py,
                            outcome,
                        });
                    }
                }
                states[root_idx].actions = actions;
            }
            ControlMode::FrozenFirstAttempt => {
                for (first_correct, answer) in [(true, "right"), (false, "wrong")] {
                    let mass = d0
                        * if first_correct {
                            refs.p_right
                        } else {
                            1.0 - refs.p_right
                        };
                    let root_idx = states.len();
                    roots.push((root_idx, mass));
                    states.push(StateNode {
                        name: format!("x{prompt}|{answer}"),
                        step: 1,
                        actions: Vec::new(),
                    });
                    let y_yes = if first_correct {
                        refs.yes_given_right
                    } else {
                        refs.yes_given_wrong
                    };
                    let mut actions = Vec::with_capacity(2);
                    for (says_yes, verdict) in [(true, "yes"), (false, "no")] {
                        let py = if says_yes { y_yes } else { 1.0 - y_yes };
                        let outcome = if says_yes {
                            Outcome::Terminal(design.reward(first_correct, first_correct))
                        } else {
                            let child_idx = states.len();
                            states.push(second_turn_state(
                                format!("x{prompt}|{answer}|no"),
                                first_correct,
                                refs,
                                design,
                            ));
                            Outcome::Next(child_idx)
                        };
                        actions.push(ActionEdge {
                            name: format!("y1={verdict}"),
                            ref_prob: py,
                            outcome,
                        });
                    }
                    states[root_idx].actions = actions;
                }
            }
        }
    }

    let mdp = TabularMdp {
        states,
        roots,
        horizon: 2,
    };
    mdp.validate()?;
    Ok(ScMdp { mdp, first_wrong })
}

/// Probe configuration; the defaults are the documented instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub refs: ScRefParams,
    pub eta: f64,
    pub bonus: f64,
    pub base: f64,
    /// Flag hacking when the shaped design's first-wrong probability exceeds
    /// the correctness-only design's by this much.
    pub margin: f64,
    pub n_prompts: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            refs: ScRefParams::default(),
            eta: 0.1,
            bonus: 1.5,
            base: 1.0,
            margin: 0.5,
            n_prompts: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HackingReport {
    pub first_wrong_correctness_only: f64,
    pub first_wrong_shaped: f64,
    pub objective_correctness_only: f64,
    pub objective_shaped: f64,
    pub margin: f64,
    pub hacking_detected: bool,
}

/// Solves the probe MDP under both reward designs and reports how much
/// first-attempt-wrong probability the shaped bonus buys.
pub fn hacking_probe(config: &ProbeConfig) -> Result<HackingReport> {
    let correctness = build_self_correction_mdp(
        config.n_prompts,
        ControlMode::FullControl,
        &config.refs,
        RewardDesign::CorrectnessOnly,
    )?;
    let shaped = build_self_correction_mdp(
        config.n_prompts,
        ControlMode::FullControl,
        &config.refs,
        RewardDesign::ShapedWrongThenCorrect {
            bonus: config.bonus,
            base: config.base,
        },
    )?;
    let solved_correctness = solve(&correctness.mdp, config.eta)?;
    let solved_shaped = solve(&shaped.mdp, config.eta)?;
    let p_correctness = correctness.first_wrong_probability(&solved_correctness.pi_star)?;
    let p_shaped = shaped.first_wrong_probability(&solved_shaped.pi_star)?;
    Ok(HackingReport {
        first_wrong_correctness_only: p_correctness,
        first_wrong_shaped: p_shaped,
        objective_correctness_only: solved_correctness.objective,
        objective_shaped: solved_shaped.objective,
        margin: config.margin,
        hacking_detected: p_shaped - p_correctness > config.margin,
    })
}

/// Random two-turn instance for solver/oracle cross-checks: up to 3 prompts,
/// 2 to 4 attempt values jointly with 2 verdicts per state, bounded-below
/// reference probabilities, terminal rewards in [0, 1.5].
pub fn random_two_turn_mdp(factory: &RngFactory, index: usize) -> TabularMdp {
    let mut rng = factory.stream(&["random-mdp", &index.to_string()]);
    let n_prompts = rng.gen_range(1..=3usize);
    let mut states = Vec::new();
    let mut roots = Vec::new();

    let weights: Vec<f64> = (0..n_prompts).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = weights.iter().sum();

    for (prompt, weight) in weights.iter().enumerate() {
        let n_attempts = rng.gen_range(2..=4usize);
        let root_idx = states.len();
        roots.push((root_idx, weight / total));
        states.push(StateNode {
            name: format!("x{prompt}"),
            step: 1,
            actions: Vec::new(),
        });

        let mut actions = Vec::new();
        let mut refs: Vec<f64> = (0..n_attempts * 2).map(|_| rng.gen_range(0.05..1.0)).collect();
        let mass: f64 = refs.iter().sum();
        refs.iter_mut().for_each(|r| *r /= mass);
        let mut ref_iter = refs.into_iter();

        for attempt in 0..n_attempts {
            for verdict in ["yes", "no"] {
                let ref_prob = ref_iter.next().unwrap();
                let outcome = if verdict == "yes" {
                    Outcome::Terminal(rng.gen_range(0.0..1.5))
                } else {
                    let n_attempts2 = rng.gen_range(2..=4usize);
                    let child_idx = states.len();
                    let mut child_refs: Vec<f64> =
                        (0..n_attempts2 * 2).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let child_mass: f64 = child_refs.iter().sum();
                    child_refs.iter_mut().for_each(|r| *r /= child_mass);
                    let child_actions = child_refs
                        .into_iter()
                        .enumerate()
                        .map(|(j, ref_prob)| ActionEdge {
                            name: format!("a2_{j}"),
                            ref_prob,
                            outcome: Outcome::Terminal(rng.gen_range(0.0..1.5)),
                        })
                        .collect();
                    states.push(StateNode {
                        name: format!("x{prompt}|a{attempt}|no"),
                        step: 2,
                        actions: child_actions,
                    });
                    Outcome::Next(child_idx)
                };
                actions.push(ActionEdge {
                    name: format!("a{attempt}|{verdict}"),
                    ref_prob,
                    outcome,
                });
            }
        }
        states[root_idx].actions = actions;
    }

    let mdp = TabularMdp {
        states,
        roots,
        horizon: 2,
    };
    debug_assert!(mdp.validate().is_ok());
    mdp
}
