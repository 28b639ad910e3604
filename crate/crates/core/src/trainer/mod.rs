//! Objectives and gradients for tabular softmax policies.
//!
//! The trainable policy lives on a registry of context states derived from
//! the problem set: a first-attempt state per problem, an evaluation state
//! per (problem, first answer), a revision state per (problem, first answer),
//! and a second-evaluation state per (problem, first answer, second answer).
//! Trajectories and preference pairs are segmented into (context, choice)
//! steps; external instructions become masked segments that never enter a
//! likelihood sum. At tabular scale a segment is one choice, so per-segment
//! and per-token log-ratio sums coincide; a token-level port would have to
//! pick one.

pub mod objective;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EvalToken, Problem, TrajectoryClass};
use crate::pipeline::{IftDataset, PairSuffix, PreferencePair};
use crate::policy::PolicyTable;
use crate::verifier::normalize_answer;

pub use objective::{
    implicit_reward, mdpo_loss, mean_preference_satisfaction, sft_objective,
    sft_objective_segmented, train, LossKind, TrainConfig, TrainOutcome, TrainingData,
};

const VERDICT_LABELS: [&str; 2] = ["correct", "wrong"];

/// One generated step of a trajectory, resolved against the tabular space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    /// A policy choice that participates in likelihoods and rewards.
    Trainable { state: usize, choice: usize },
    /// A deterministic external instruction; masked out of every sum.
    ExternalInstruction { instruction_id: String },
}

/// Why a segmented trajectory is in the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentRole {
    Class(TrajectoryClass),
    Winner,
    Loser,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedTrajectory {
    pub segments: Vec<Segment>,
    pub role: SegmentRole,
}

impl SegmentedTrajectory {
    pub fn trainable(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Trainable { state, choice } => Some((*state, *choice)),
            Segment::ExternalInstruction { .. } => None,
        })
    }
}

/// A preference pair with both sides segmented.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedPair {
    pub winner: SegmentedTrajectory,
    pub loser: SegmentedTrajectory,
}

#[derive(Debug, Clone)]
struct SpaceState {
    key: String,
    actions: Vec<String>,
    action_index: HashMap<String, usize>,
}

/// Registry of context states and their action labels.
#[derive(Debug, Clone)]
pub struct TabularSpace {
    states: Vec<SpaceState>,
    index: HashMap<String, usize>,
}

fn canonical(answer: &str) -> String {
    normalize_answer(answer).rendering()
}

impl TabularSpace {
    /// Builds the registry from problems and per-problem answer candidates.
    /// The gold answer is always a candidate; `extra_answers` adds the rest
    /// (canonicalized, deduplicated).
    pub fn build(problems: &[Problem], extra_answers: &BTreeMap<String, BTreeSet<String>>) -> Self {
        let mut space = TabularSpace {
            states: Vec::new(),
            index: HashMap::new(),
        };
        for problem in problems {
            let gold = canonical(&problem.gold_answer);
            let mut answers: Vec<String> = vec![gold.clone()];
            if let Some(extras) = extra_answers.get(&problem.id) {
                for raw in extras {
                    let c = canonical(raw);
                    if !answers.contains(&c) {
                        answers.push(c);
                    }
                }
            }
            let verdicts: Vec<String> = VERDICT_LABELS.iter().map(|s| s.to_string()).collect();

            space.add_state(format!("a1|{}", problem.id), answers.clone());
            for a1 in &answers {
                space.add_state(format!("y1|{}|{a1}", problem.id), verdicts.clone());
                space.add_state(format!("a2|{}|{a1}", problem.id), answers.clone());
                for a2 in &answers {
                    space.add_state(format!("y2|{}|{a1}|{a2}", problem.id), verdicts.clone());
                }
            }
        }
        space
    }

    /// Builds a registry covering everything referenced by the given
    /// trajectories and pairs.
    pub fn covering<'a>(
        problems: &[Problem],
        trajectories: impl Iterator<Item = &'a crate::model::Trajectory>,
        pairs: &[PreferencePair],
    ) -> Self {
        let mut extra: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for traj in trajectories {
            let set = extra.entry(traj.problem_id.clone()).or_default();
            for turn in &traj.turns {
                if let Some(answer) = &turn.extracted_answer {
                    set.insert(answer.clone());
                }
            }
        }
        for pair in pairs {
            let set = extra.entry(pair.problem_id.clone()).or_default();
            set.insert(pair.first_answer.clone());
            for suffix in [&pair.winner, &pair.loser] {
                if let Some(answer) = &suffix.second_answer {
                    set.insert(answer.clone());
                }
            }
        }
        Self::build(problems, &extra)
    }

    fn add_state(&mut self, key: String, actions: Vec<String>) {
        if self.index.contains_key(&key) {
            return;
        }
        let action_index = actions
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        self.index.insert(key.clone(), self.states.len());
        self.states.push(SpaceState {
            key,
            actions,
            action_index,
        });
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn arities(&self) -> Vec<usize> {
        self.states.iter().map(|s| s.actions.len()).collect()
    }

    pub fn state_key(&self, idx: usize) -> &str {
        &self.states[idx].key
    }

    pub fn action_label(&self, state: usize, action: usize) -> &str {
        &self.states[state].actions[action]
    }

    /// Uniform-logit policy aligned with this space.
    pub fn uniform_policy(&self) -> PolicyTable {
        PolicyTable::uniform(&self.arities())
    }

    fn state(&self, key: &str) -> Result<usize> {
        self.index
            .get(key)
            .copied()
            .ok_or_else(|| Error::UnknownContext(key.to_string()))
    }

    fn action(&self, state: usize, label: &str) -> Result<usize> {
        self.states[state]
            .action_index
            .get(label)
            .copied()
            .ok_or_else(|| {
                Error::UnknownContext(format!(
                    "choice {label:?} in state {:?}",
                    self.states[state].key
                ))
            })
    }

    fn verdict_label(token: EvalToken) -> Result<&'static str> {
        match token {
            EvalToken::VerifyCorrect => Ok("correct"),
            EvalToken::VerifyWrong => Ok("wrong"),
            EvalToken::Malformed => Err(Error::UnknownContext(
                "malformed evaluations are not trainable choices".into(),
            )),
        }
    }

    fn seg(&self, state_key: &str, choice: &str) -> Result<Segment> {
        let state = self.state(state_key)?;
        let choice = self.action(state, choice)?;
        Ok(Segment::Trainable { state, choice })
    }

    /// Segments one fine-tuning trajectory according to its filter class:
    /// the wrong-then-fixed class trains the verdict and the revision, the
    /// misflagged-but-correct class trains only the revision, the confirmed
    /// class trains the verdict (plus the first attempt when
    /// `include_a1_for_d3` is set).
    pub fn segment_ift_trajectory(
        &self,
        traj: &crate::model::Trajectory,
        class: TrajectoryClass,
        include_a1_for_d3: bool,
    ) -> Result<SegmentedTrajectory> {
        let pid = &traj.problem_id;
        let first = traj.first_turn();
        let a1 = canonical(first.extracted_answer.as_deref().unwrap_or_default());
        let mut segments = Vec::new();
        match class {
            TrajectoryClass::D1Ift | TrajectoryClass::D2Ift => {
                if class == TrajectoryClass::D1Ift {
                    segments.push(self.seg(&format!("y1|{pid}|{a1}"), "wrong")?);
                }
                segments.push(Segment::ExternalInstruction {
                    instruction_id: traj
                        .instructions
                        .first()
                        .cloned()
                        .unwrap_or_else(|| "revise_after_wrong".into()),
                });
                let second = &traj.turns[1];
                let a2 = canonical(second.extracted_answer.as_deref().unwrap_or_default());
                segments.push(self.seg(&format!("a2|{pid}|{a1}"), &a2)?);
            }
            TrajectoryClass::D3Ift => {
                if include_a1_for_d3 {
                    segments.push(self.seg(&format!("a1|{pid}"), &a1)?);
                }
                segments.push(self.seg(&format!("y1|{pid}|{a1}"), "correct")?);
            }
            TrajectoryClass::Discard => {
                return Err(Error::UnknownContext(
                    "discard trajectories are not trainable".into(),
                ))
            }
        }
        Ok(SegmentedTrajectory {
            segments,
            role: SegmentRole::Class(class),
        })
    }

    /// Segments a whole dataset; correct-to-correct augmentations use the
    /// misflagged-class rule.
    pub fn segment_ift(
        &self,
        dataset: &IftDataset,
        include_a1_for_d3: bool,
    ) -> Result<Vec<SegmentedTrajectory>> {
        let mut out = Vec::with_capacity(dataset.len());
        let buckets = [
            (&dataset.d1, TrajectoryClass::D1Ift),
            (&dataset.d2, TrajectoryClass::D2Ift),
            (&dataset.d3, TrajectoryClass::D3Ift),
            (&dataset.c2c, TrajectoryClass::D2Ift),
        ];
        for (bucket, class) in buckets {
            for traj in bucket.iter() {
                out.push(self.segment_ift_trajectory(traj, class, include_a1_for_d3)?);
            }
        }
        Ok(out)
    }

    /// Segments a pair suffix: the shared (problem, first attempt) prefix is
    /// the conditioning context and contributes no segments. A malformed or
    /// absent second verdict contributes no segment.
    pub fn segment_suffix(
        &self,
        problem_id: &str,
        first_answer: &str,
        suffix: &PairSuffix,
        role: SegmentRole,
    ) -> Result<SegmentedTrajectory> {
        let a1 = canonical(first_answer);
        let mut segments = Vec::new();
        segments.push(self.seg(
            &format!("y1|{problem_id}|{a1}"),
            Self::verdict_label(suffix.first_eval)?,
        )?);
        if let Some(second_answer) = &suffix.second_answer {
            segments.push(Segment::ExternalInstruction {
                instruction_id: "revise_after_wrong".into(),
            });
            let a2 = canonical(second_answer);
            segments.push(self.seg(&format!("a2|{problem_id}|{a1}"), &a2)?);
            if let Some(second_eval) = suffix.second_eval {
                if second_eval != EvalToken::Malformed {
                    segments.push(self.seg(
                        &format!("y2|{problem_id}|{a1}|{a2}"),
                        Self::verdict_label(second_eval)?,
                    )?);
                }
            }
        }
        Ok(SegmentedTrajectory { segments, role })
    }

    pub fn segment_pair(&self, pair: &PreferencePair) -> Result<SegmentedPair> {
        Ok(SegmentedPair {
            winner: self.segment_suffix(
                &pair.problem_id,
                &pair.first_answer,
                &pair.winner,
                SegmentRole::Winner,
            )?,
            loser: self.segment_suffix(
                &pair.problem_id,
                &pair.first_answer,
                &pair.loser,
                SegmentRole::Loser,
            )?,
        })
    }

    pub fn segment_pairs(&self, pairs: &[PreferencePair]) -> Result<Vec<SegmentedPair>> {
        pairs.iter().map(|p| self.segment_pair(p)).collect()
    }
}
