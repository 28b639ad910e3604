//! Parameterized generator oracles standing in for LLM policies.
//!
//! An [`OracleProfile`] is a stochastic stand-in for a fine-tuned model:
//! first-attempt accuracy `p1`, class-dependent reward-model rates
//! (`rm_tpr` = P[VerifyCorrect | attempt correct], `rm_tnr` =
//! P[VerifyWrong | attempt wrong]), revision reliability `q_fix`, the
//! corruption rate `p_flip` under a misleading wrong signal, and a malformed
//!-evaluation rate. Rollouts follow the two-turn conversation protocol with
//! deterministic instructions between turns.
//!
//! Expected attempts per trajectory under self-rewarding with cap 2:
//!
//! ```text
//! E[attempts] = 1 + (1 - malformed_rate) * (p1*(1 - rm_tpr) + (1 - p1)*rm_tnr)
//! ```
//!
//! The second attempt happens exactly when the first evaluation is a
//! well-formed VerifyWrong: either the attempt was correct and misflagged
//! (prob p1*(1-rm_tpr)) or wrong and caught (prob (1-p1)*rm_tnr). A malformed
//! evaluation terminates with the current answer, hence the (1 - malformed_rate)
//! factor.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EvalToken, Problem, TerminationReason, Trajectory, TrajectorySource, Turn};
use crate::rng::RngFactory;
use crate::verifier::normalize_answer;

/// Instruction sent after a wrong self-evaluation.
pub const INSTRUCTION_REVISE_AFTER_WRONG: &str = "Since your initial response is self-evaluated as incorrect, there might be an error in the solution above because of lack of understanding of the question. Please correct the error, if any, and rewrite the solution. Put your final answer within $\\boxed{}$";

/// Instruction sent after a correct self-evaluation.
pub const INSTRUCTION_CONFIRM_AFTER_CORRECT: &str = "Since your initial response is self-evaluated as correct, confirm it and provide no further modifications. Put your final answer within $\\boxed{}$";

/// Instruction used by the intrinsic-correction baseline, which revises
/// unconditionally.
pub const INSTRUCTION_INTRINSIC: &str = "There might be an error in the solution above because of lack of understanding of the question. Please correct the error, if any, and rewrite the solution.";

/// Instruction used when an external gold signal reports the answer wrong.
pub const INSTRUCTION_GOLD_WRONG: &str = "Your initial response is evaluated as incorrect. There might be an error in the solution above because of lack of understanding of the question. Please correct the error, if any, and rewrite the solution.";

/// Resolve an instruction id to its exported text.
pub fn instruction_text(id: &str) -> Option<&'static str> {
    match id {
        "revise_after_wrong" => Some(INSTRUCTION_REVISE_AFTER_WRONG),
        "confirm_after_correct" => Some(INSTRUCTION_CONFIRM_AFTER_CORRECT),
        "intrinsic_revise" => Some(INSTRUCTION_INTRINSIC),
        "gold_revise" => Some(INSTRUCTION_GOLD_WRONG),
        _ => None,
    }
}

/// Stochastic stand-in for an LLM policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleProfile {
    /// P[first attempt correct].
    pub p1: f64,
    /// P[VerifyCorrect | attempt correct] (reward-model true positive rate).
    pub rm_tpr: f64,
    /// P[VerifyWrong | attempt wrong] (reward-model true negative rate).
    pub rm_tnr: f64,
    /// P[revision correct | previous wrong, told wrong].
    pub q_fix: f64,
    /// P[revision wrong | previous correct, told wrong].
    pub p_flip: f64,
    /// P[self-evaluation malformed].
    pub malformed_rate: f64,
    /// Number of distinct wrong answers available per problem.
    pub answer_space: usize,
}

impl OracleProfile {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p1", self.p1),
            ("rm_tpr", self.rm_tpr),
            ("rm_tnr", self.rm_tnr),
            ("q_fix", self.q_fix),
            ("p_flip", self.p_flip),
            ("malformed_rate", self.malformed_rate),
        ];
        for (name, value) in probs {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::Config(format!(
                    "profile.{name} must be in [0,1], got {value}"
                )));
            }
        }
        if self.answer_space == 0 {
            return Err(Error::Config("profile.answer_space must be >= 1".into()));
        }
        Ok(())
    }

    /// Closed-form expected attempts per self-rewarding trajectory at cap 2.
    pub fn expected_attempts_cap2(&self) -> f64 {
        1.0 + (1.0 - self.malformed_rate)
            * (self.p1 * (1.0 - self.rm_tpr) + (1.0 - self.p1) * self.rm_tnr)
    }
}

impl Default for OracleProfile {
    fn default() -> Self {
        Self {
            p1: 0.5,
            rm_tpr: 0.93,
            rm_tnr: 0.477,
            q_fix: 0.8,
            p_flip: 0.3,
            malformed_rate: 0.0,
            answer_space: 4,
        }
    }
}

/// How the rollout decides when to revise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorMode {
    /// Stop on a VerifyCorrect self-evaluation, otherwise revise.
    SelfRewarding,
    /// Revise once regardless of the verdict (intrinsic-correction baseline).
    IntrinsicAlwaysRevise,
    /// The verdict is replaced by the ground-truth verifier's answer.
    GoldRm,
}

/// Two-turn conversation protocol with deterministic instructions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    pub horizon_cap: usize,
    pub instruction_wrong: String,
    pub instruction_correct: String,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            horizon_cap: 2,
            instruction_wrong: "revise_after_wrong".into(),
            instruction_correct: "confirm_after_correct".into(),
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_cap < 1 {
            return Err(Error::Config("protocol.horizon_cap must be >= 1".into()));
        }
        for id in [&self.instruction_wrong, &self.instruction_correct] {
            if instruction_text(id).is_none() {
                return Err(Error::Config(format!("unknown instruction id {id:?}")));
            }
        }
        Ok(())
    }
}

/// An attempt before its self-evaluation is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attempt {
    pub text: String,
    pub answer: String,
    pub is_correct: bool,
}

impl Attempt {
    pub fn into_turn(self, self_eval: EvalToken) -> Turn {
        Turn::new(self.text, Some(self.answer), self.is_correct, self_eval)
    }
}

/// Deterministic per-problem wrong-answer space: `k` distinct answers, none
/// equal to the gold answer. Numeric golds get neighboring values so that
/// majority voting over wrong answers is nontrivial; other golds get tagged
/// symbolic variants.
pub fn wrong_answers(problem: &Problem, k: usize) -> Vec<String> {
    use crate::verifier::CanonicalValue;
    let gold = normalize_answer(&problem.gold_answer);
    let mut out = Vec::with_capacity(k);
    match gold.value {
        CanonicalValue::Integer(n) => {
            for i in 1..=k as i128 {
                let delta = (i + 1) / 2;
                let candidate = if i % 2 == 1 { n + delta } else { n - delta };
                out.push(candidate.to_string());
            }
        }
        CanonicalValue::Decimal { mantissa, scale } => {
            // Step large enough that no candidate falls inside the decimal
            // comparison tolerance around the gold value.
            let step = (mantissa.abs() / 500).max(1);
            for i in 1..=k as i128 {
                let delta = step * ((i + 1) / 2);
                let candidate = if i % 2 == 1 {
                    mantissa + delta
                } else {
                    mantissa - delta
                };
                out.push(
                    crate::verifier::normalize_answer(&format_decimal(candidate, scale))
                        .rendering(),
                );
            }
        }
        CanonicalValue::Rational { num, den } => {
            for i in 1..=k as i128 {
                let delta = (i + 1) / 2;
                let candidate = if i % 2 == 1 { num + delta } else { num - delta };
                out.push(format!("{candidate}/{den}"));
            }
        }
        CanonicalValue::Symbolic(ref s) => {
            for i in 1..=k {
                out.push(format!("{s}#alt{i}"));
            }
        }
    }
    out
}

fn format_decimal(mantissa: i128, scale: u32) -> String {
    let sign = if mantissa < 0 { "-" } else { "" };
    let abs = mantissa.unsigned_abs().to_string();
    let scale = scale as usize;
    if scale == 0 {
        return mantissa.to_string();
    }
    if abs.len() > scale {
        let (int, frac) = abs.split_at(abs.len() - scale);
        format!("{sign}{int}.{frac}")
    } else {
        format!("{sign}0.{}{}", "0".repeat(scale - abs.len()), abs)
    }
}

fn attempt_text(tag: &str, answer: &str) -> String {
    format!("[{tag}] After working through the problem, the final answer is $\\boxed{{{answer}}}$.")
}

/// Samples a first attempt: correct with probability `p1`, otherwise a
/// uniformly chosen wrong answer. The text embeds the answer in a box so the
/// verifier round-trips it. `tag` disambiguates base samples textually.
pub fn sample_first_attempt(
    profile: &OracleProfile,
    problem: &Problem,
    tag: &str,
    rng: &mut ChaCha12Rng,
) -> Attempt {
    let correct = rng.gen::<f64>() < profile.p1;
    let answer = if correct {
        problem.gold_answer.clone()
    } else {
        let space = wrong_answers(problem, profile.answer_space);
        space[rng.gen_range(0..space.len())].clone()
    };
    Attempt {
        text: attempt_text(tag, &answer),
        answer,
        is_correct: correct,
    }
}

/// Samples the self-evaluation token: malformed with `malformed_rate`,
/// otherwise VerifyCorrect with `rm_tpr` on correct attempts and VerifyWrong
/// with `rm_tnr` on wrong attempts.
pub fn sample_self_evaluation(
    profile: &OracleProfile,
    is_correct: bool,
    rng: &mut ChaCha12Rng,
) -> EvalToken {
    if rng.gen::<f64>() < profile.malformed_rate {
        return EvalToken::Malformed;
    }
    let says_correct = if is_correct {
        rng.gen::<f64>() < profile.rm_tpr
    } else {
        rng.gen::<f64>() >= profile.rm_tnr
    };
    if says_correct {
        EvalToken::VerifyCorrect
    } else {
        EvalToken::VerifyWrong
    }
}

/// Samples a revision after a wrong signal. A previously wrong answer is
/// fixed with probability `q_fix`; a previously correct answer is corrupted
/// with probability `p_flip`, otherwise restated.
pub fn sample_revision(
    profile: &OracleProfile,
    problem: &Problem,
    previous_correct: bool,
    tag: &str,
    rng: &mut ChaCha12Rng,
) -> Attempt {
    let correct = if previous_correct {
        rng.gen::<f64>() >= profile.p_flip
    } else {
        rng.gen::<f64>() < profile.q_fix
    };
    let answer = if correct {
        problem.gold_answer.clone()
    } else {
        let space = wrong_answers(problem, profile.answer_space);
        space[rng.gen_range(0..space.len())].clone()
    };
    Attempt {
        text: attempt_text(tag, &answer),
        answer,
        is_correct: correct,
    }
}

/// Rolls one trajectory under the given behavior mode. Deterministic given
/// the factory's master seed, the problem id, and the replicate index.
pub fn roll_trajectory(
    profile: &OracleProfile,
    mode: BehaviorMode,
    protocol: &Protocol,
    problem: &Problem,
    factory: &RngFactory,
    replicate: usize,
) -> Trajectory {
    let mut turns: Vec<Turn> = Vec::new();
    let mut instructions: Vec<String> = Vec::new();
    let first_tag = format!("{}-r{replicate}-t1", problem.id);
    let mut attempt = {
        let mut rng = factory.problem_stream(&problem.id, replicate, "attempt1");
        sample_first_attempt(profile, problem, &first_tag, &mut rng)
    };

    let mut h = 1usize;
    let terminated_by = loop {
        let eval = match mode {
            BehaviorMode::GoldRm => {
                if attempt.is_correct {
                    EvalToken::VerifyCorrect
                } else {
                    EvalToken::VerifyWrong
                }
            }
            BehaviorMode::IntrinsicAlwaysRevise if h < protocol.horizon_cap => {
                // The baseline revises unconditionally; the recorded verdict
                // is the forced wrong signal that triggers the revision.
                EvalToken::VerifyWrong
            }
            _ => {
                let mut rng =
                    factory.problem_stream(&problem.id, replicate, &format!("eval{h}"));
                sample_self_evaluation(profile, attempt.is_correct, &mut rng)
            }
        };
        let is_correct = attempt.is_correct;
        turns.push(attempt.clone().into_turn(eval));

        match eval {
            EvalToken::Malformed => break TerminationReason::MalformedEval,
            EvalToken::VerifyCorrect => break TerminationReason::SelfVerifiedCorrect,
            EvalToken::VerifyWrong => {
                if h >= protocol.horizon_cap {
                    break TerminationReason::HorizonCap;
                }
                let instruction = match mode {
                    BehaviorMode::IntrinsicAlwaysRevise => "intrinsic_revise".to_string(),
                    BehaviorMode::GoldRm => "gold_revise".to_string(),
                    BehaviorMode::SelfRewarding => protocol.instruction_wrong.clone(),
                };
                instructions.push(instruction);
                let tag = format!("{}-r{replicate}-t{}", problem.id, h + 1);
                let mut rng =
                    factory.problem_stream(&problem.id, replicate, &format!("revision{h}"));
                attempt = sample_revision(profile, problem, is_correct, &tag, &mut rng);
                h += 1;
            }
        }
    };

    Trajectory {
        problem_id: problem.id.clone(),
        turns,
        instructions,
        terminated_by,
        source: TrajectorySource::Simulated,
    }
}
