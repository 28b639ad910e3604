//! Domain types for the multi-turn self-rewarding loop.
//!
//! A [`Trajectory`] records one problem's attempts: each [`Turn`] carries the
//! attempt text, the ground-truth verdict, and the model's own evaluation
//! token. Trajectories classify into the kept filter classes (wrong then
//! fixed, correct but misflagged yet still correct, correct and confirmed)
//! or are discarded. Records persist one-per-line as JSON; unknown fields
//! are rejected.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A math problem with its canonical gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub id: String,
    pub statement: String,
    pub gold_answer: String,
}

impl Problem {
    pub fn new(
        id: impl Into<String>,
        statement: impl Into<String>,
        gold_answer: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            statement: statement.into(),
            gold_answer: gold_answer.into(),
        }
    }
}

/// The model's self-evaluation verdict for one turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalToken {
    /// "[VERIFY] correct"
    #[serde(rename = "correct")]
    VerifyCorrect,
    /// "[VERIFY] wrong"
    #[serde(rename = "wrong")]
    VerifyWrong,
    /// The model failed to emit a verdict in the expected format.
    Malformed,
}

/// One attempt plus its self-evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub attempt_text: String,
    pub extracted_answer: Option<String>,
    /// Ground-truth verdict on the attempt.
    pub is_correct: bool,
    pub self_eval: EvalToken,
    /// Whether the self-evaluation agrees with ground truth; always false for
    /// malformed evaluations.
    pub eval_matches_truth: bool,
}

impl Turn {
    pub fn new(
        attempt_text: impl Into<String>,
        extracted_answer: Option<String>,
        is_correct: bool,
        self_eval: EvalToken,
    ) -> Self {
        Self {
            attempt_text: attempt_text.into(),
            extracted_answer,
            is_correct,
            self_eval,
            eval_matches_truth: eval_matches_truth(self_eval, is_correct),
        }
    }
}

/// The flag value implied by (verdict, ground truth).
pub fn eval_matches_truth(self_eval: EvalToken, is_correct: bool) -> bool {
    match self_eval {
        EvalToken::Malformed => false,
        EvalToken::VerifyCorrect => is_correct,
        EvalToken::VerifyWrong => !is_correct,
    }
}

/// Why a trajectory stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    SelfVerifiedCorrect,
    HorizonCap,
    MalformedEval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySource {
    Simulated,
    Imported,
}

/// One problem's full multi-turn record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub problem_id: String,
    pub turns: Vec<Turn>,
    /// Instruction ids injected between turns; length is turns - 1.
    pub instructions: Vec<String>,
    pub terminated_by: TerminationReason,
    pub source: TrajectorySource,
}

impl Trajectory {
    pub fn first_turn(&self) -> &Turn {
        &self.turns[0]
    }

    pub fn last_turn(&self) -> &Turn {
        self.turns.last().expect("trajectory has at least one turn")
    }

    pub fn horizon(&self) -> usize {
        self.turns.len()
    }
}

/// Kept filter classes for instruction-following fine-tuning data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryClass {
    /// Wrong first attempt, flagged wrong, fixed on the second attempt.
    D1Ift,
    /// Correct first attempt, misflagged wrong, still correct after revising.
    D2Ift,
    /// Correct first attempt, confirmed correct.
    D3Ift,
    Discard,
}

/// A violated trajectory invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Trajectory has no turns.
    EmptyTurns,
    /// A non-final turn's self-evaluation is not VerifyWrong; the loop only
    /// continues after a wrong verdict.
    ContinuationAfterCorrect { turn: usize },
    /// instructions length is not turns - 1.
    InstructionCount { expected: usize, actual: usize },
    /// terminated_by disagrees with the final turn's self-evaluation.
    TerminationMismatch {
        terminated_by: TerminationReason,
        last_eval: EvalToken,
    },
    /// A stored eval_matches_truth flag disagrees with (self_eval, is_correct).
    EvalFlagMismatch { turn: usize },
    /// Horizon exceeds the configured cap.
    HorizonExceeded { horizon: usize, cap: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyTurns => write!(f, "empty-turns"),
            Violation::ContinuationAfterCorrect { turn } => {
                write!(f, "continuation-after-correct (turn {turn})")
            }
            Violation::InstructionCount { expected, actual } => {
                write!(f, "instruction-count (expected {expected}, got {actual})")
            }
            Violation::TerminationMismatch {
                terminated_by,
                last_eval,
            } => write!(
                f,
                "termination-mismatch ({terminated_by:?} vs last eval {last_eval:?})"
            ),
            Violation::EvalFlagMismatch { turn } => {
                write!(f, "eval-flag-mismatch (turn {turn})")
            }
            Violation::HorizonExceeded { horizon, cap } => {
                write!(f, "horizon-exceeded ({horizon} > cap {cap})")
            }
        }
    }
}

/// Checks every trajectory invariant and returns all violations; an empty
/// list means the trajectory is valid. Deterministic.
pub fn validate_trajectory(traj: &Trajectory) -> Vec<Violation> {
    let mut violations = Vec::new();
    if traj.turns.is_empty() {
        violations.push(Violation::EmptyTurns);
        return violations;
    }
    let last = traj.turns.len() - 1;
    for (i, turn) in traj.turns.iter().enumerate() {
        if i < last && turn.self_eval != EvalToken::VerifyWrong {
            violations.push(Violation::ContinuationAfterCorrect { turn: i + 1 });
        }
        if turn.eval_matches_truth != eval_matches_truth(turn.self_eval, turn.is_correct) {
            violations.push(Violation::EvalFlagMismatch { turn: i + 1 });
        }
    }
    if traj.instructions.len() != last {
        violations.push(Violation::InstructionCount {
            expected: last,
            actual: traj.instructions.len(),
        });
    }
    let last_eval = traj.turns[last].self_eval;
    let termination_ok = match traj.terminated_by {
        TerminationReason::SelfVerifiedCorrect => last_eval == EvalToken::VerifyCorrect,
        TerminationReason::MalformedEval => last_eval == EvalToken::Malformed,
        TerminationReason::HorizonCap => last_eval == EvalToken::VerifyWrong,
    };
    if !termination_ok {
        violations.push(Violation::TerminationMismatch {
            terminated_by: traj.terminated_by,
            last_eval,
        });
    }
    violations
}

/// Classifies a trajectory into its filter class. Total and deterministic on
/// valid trajectories; invalid trajectories are a structured error listing
/// every violated invariant.
pub fn classify_trajectory(traj: &Trajectory, horizon_cap: usize) -> Result<TrajectoryClass> {
    let mut violations = validate_trajectory(traj);
    if traj.turns.len() > horizon_cap {
        violations.push(Violation::HorizonExceeded {
            horizon: traj.turns.len(),
            cap: horizon_cap,
        });
    }
    if !violations.is_empty() {
        return Err(Error::InvalidTrajectory(violations));
    }

    let first = traj.first_turn();
    let class = match traj.turns.len() {
        1 => {
            if first.is_correct && first.self_eval == EvalToken::VerifyCorrect {
                TrajectoryClass::D3Ift
            } else {
                TrajectoryClass::Discard
            }
        }
        2 => {
            let second = &traj.turns[1];
            // Validity already forces the first verdict to be VerifyWrong.
            match (first.is_correct, second.is_correct) {
                (false, true) => TrajectoryClass::D1Ift,
                (true, true) => TrajectoryClass::D2Ift,
                _ => TrajectoryClass::Discard,
            }
        }
        _ => TrajectoryClass::Discard,
    };
    Ok(class)
}

/// Writes trajectories one JSON record per line. All trajectories must be
/// valid.
pub fn write_trajectories<P: AsRef<Path>>(path: P, trajectories: &[Trajectory]) -> Result<()> {
    for traj in trajectories {
        let violations = validate_trajectory(traj);
        if !violations.is_empty() {
            return Err(Error::InvalidTrajectory(violations));
        }
    }
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for traj in trajectories {
        let line = serde_json::to_string(traj).expect("trajectory serializes");
        writeln!(writer, "{line}").map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes problems one JSON record per line.
pub fn write_problems<P: AsRef<Path>>(path: P, problems: &[Problem]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = BufWriter::new(file);
    for problem in problems {
        let line = serde_json::to_string(problem).expect("problem serializes");
        writeln!(writer, "{line}").map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a line-delimited problem file.
pub fn read_problems<P: AsRef<Path>>(path: P) -> Result<Vec<Problem>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut problems = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let problem: Problem = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: idx + 1,
            message: e.to_string(),
        })?;
        problems.push(problem);
    }
    Ok(problems)
}

/// Reads a line-delimited trajectory file. Schema violations report the
/// offending line number; an empty file is an empty list.
pub fn read_trajectories<P: AsRef<Path>>(path: P) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut trajectories = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let traj: Trajectory = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: idx + 1,
            message: e.to_string(),
        })?;
        trajectories.push(traj);
    }
    Ok(trajectories)
}
