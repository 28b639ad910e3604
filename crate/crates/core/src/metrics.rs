//! Self-correction metric suite, majority voting, and budget curves.
//!
//! All rates derive from raw confusion counts, so the identities
//! `final = turn1 + delta` and `delta = delta_itc - delta_cti` hold exactly
//! on counts, never just approximately. Reward-model rates are computed over
//! well-formed verdicts only; malformed evaluations land in their own bucket
//! and the trajectory's final answer still counts toward accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EvalToken, Problem, Trajectory};
use crate::oracle::{
    roll_trajectory, sample_revision, BehaviorMode, OracleProfile, Protocol,
};
use crate::rng::RngFactory;
use crate::verifier::{normalize_answer, CanonicalAnswer};

/// Raw confusion counts behind a [`MetricsReport`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub n: usize,
    pub turn1_correct: usize,
    pub final_correct: usize,
    /// Problems flipped incorrect -> correct between turn 1 and the end.
    pub incorrect_to_correct: usize,
    /// Problems flipped correct -> incorrect.
    pub correct_to_incorrect: usize,
    /// Well-formed verdicts on correct turns, and how many said correct.
    pub rm_correct_total: usize,
    pub rm_correct_hits: usize,
    /// Well-formed verdicts on wrong turns, and how many said wrong.
    pub rm_wrong_total: usize,
    pub rm_wrong_hits: usize,
    pub malformed_evals: usize,
    pub total_evals: usize,
    pub malformed_trajectories: usize,
}

/// The metric suite. Rates are fractions in [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: MetricCounts,
    pub turn1: f64,
    pub final_accuracy: f64,
    /// Net accuracy change, exactly `delta_itc - delta_cti`.
    pub delta: f64,
    pub delta_itc: f64,
    pub delta_cti: f64,
    /// Reward-model true positive rate (recognizing correct attempts); absent
    /// when no well-formed verdict on a correct attempt was seen.
    pub rm_tpr_hat: Option<f64>,
    /// Reward-model true negative rate.
    pub rm_tnr_hat: Option<f64>,
    pub p_cti_hat: Option<f64>,
    pub malformed_rate: f64,
}

/// Rendering used for table comparisons: percent at one decimal, rounded
/// half away from zero.
pub fn percent_1dp(rate: f64) -> f64 {
    (rate * 1000.0).round() / 10.0
}

impl MetricsReport {
    pub fn from_counts(counts: MetricCounts) -> Result<MetricsReport> {
        if counts.n == 0 {
            return Err(Error::EmptyInput("trajectories"));
        }
        let n = counts.n as f64;
        let rate = |c: usize| c as f64 / n;
        let ratio = |hits: usize, total: usize| {
            if total == 0 {
                None
            } else {
                Some(hits as f64 / total as f64)
            }
        };
        Ok(MetricsReport {
            turn1: rate(counts.turn1_correct),
            final_accuracy: rate(counts.final_correct),
            delta: (counts.incorrect_to_correct as f64 - counts.correct_to_incorrect as f64) / n,
            delta_itc: rate(counts.incorrect_to_correct),
            delta_cti: rate(counts.correct_to_incorrect),
            rm_tpr_hat: ratio(counts.rm_correct_hits, counts.rm_correct_total),
            rm_tnr_hat: ratio(counts.rm_wrong_hits, counts.rm_wrong_total),
            p_cti_hat: None,
            malformed_rate: if counts.total_evals == 0 {
                0.0
            } else {
                counts.malformed_evals as f64 / counts.total_evals as f64
            },
            counts,
        })
    }

    /// Builds a report from row-shaped confusion counts (n, turn-1 correct,
    /// incorrect-to-correct, correct-to-incorrect).
    pub fn from_confusion(
        n: usize,
        turn1_correct: usize,
        incorrect_to_correct: usize,
        correct_to_incorrect: usize,
    ) -> Result<MetricsReport> {
        if turn1_correct > n
            || incorrect_to_correct > n - turn1_correct
            || correct_to_incorrect > turn1_correct
        {
            return Err(Error::Config(format!(
                "inconsistent confusion counts: n={n}, turn1={turn1_correct}, \
                 i->c={incorrect_to_correct}, c->i={correct_to_incorrect}"
            )));
        }
        let counts = MetricCounts {
            n,
            turn1_correct,
            final_correct: turn1_correct + incorrect_to_correct - correct_to_incorrect,
            incorrect_to_correct,
            correct_to_incorrect,
            ..MetricCounts::default()
        };
        MetricsReport::from_counts(counts)
    }
}

/// Computes the metric suite over evaluation trajectories (typically one per
/// problem; replicates are allowed and counted individually).
pub fn compute_metrics(trajectories: &[Trajectory]) -> Result<MetricsReport> {
    if trajectories.is_empty() {
        return Err(Error::EmptyInput("trajectories"));
    }
    let mut counts = MetricCounts {
        n: trajectories.len(),
        ..MetricCounts::default()
    };
    for traj in trajectories {
        let first = traj.first_turn();
        let last = traj.last_turn();
        counts.turn1_correct += first.is_correct as usize;
        counts.final_correct += last.is_correct as usize;
        counts.incorrect_to_correct += (!first.is_correct && last.is_correct) as usize;
        counts.correct_to_incorrect += (first.is_correct && !last.is_correct) as usize;
        if traj
            .turns
            .iter()
            .any(|t| t.self_eval == EvalToken::Malformed)
        {
            counts.malformed_trajectories += 1;
        }
        for turn in &traj.turns {
            counts.total_evals += 1;
            match turn.self_eval {
                EvalToken::Malformed => counts.malformed_evals += 1,
                verdict => {
                    if turn.is_correct {
                        counts.rm_correct_total += 1;
                        counts.rm_correct_hits += (verdict == EvalToken::VerifyCorrect) as usize;
                    } else {
                        counts.rm_wrong_total += 1;
                        counts.rm_wrong_hits += (verdict == EvalToken::VerifyWrong) as usize;
                    }
                }
            }
        }
    }
    MetricsReport::from_counts(counts)
}

/// Estimate with a 3-sigma binomial half-width.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RateEstimate {
    pub rate: f64,
    pub half_width: f64,
    pub trials: usize,
}

/// Estimates the probability of corrupting a correct answer under a
/// misleading wrong signal: construct correct first attempts, force the
/// wrong verdict, and measure the flip fraction.
pub fn estimate_p_cti(
    profile: &OracleProfile,
    problems: &[Problem],
    trials: usize,
    factory: &RngFactory,
) -> Result<RateEstimate> {
    if trials == 0 {
        return Err(Error::EmptyInput("trials"));
    }
    if problems.is_empty() {
        return Err(Error::EmptyInput("problems"));
    }
    profile.validate()?;
    let mut flips = 0usize;
    for trial in 0..trials {
        let problem = &problems[trial % problems.len()];
        let tag = format!("{}-pcti{trial}", problem.id);
        let mut rng = factory.problem_stream(&problem.id, trial, "p_cti");
        let revision = sample_revision(profile, problem, true, &tag, &mut rng);
        flips += (!revision.is_correct) as usize;
    }
    let rate = flips as f64 / trials as f64;
    Ok(RateEstimate {
        rate,
        half_width: 3.0 * (rate * (1.0 - rate) / trials as f64).sqrt(),
        trials,
    })
}

/// Most frequent canonical answer; ties broken by the lexicographically
/// smallest canonical rendering. Permutation-invariant and deterministic.
pub fn majority_vote(answers: &[CanonicalAnswer]) -> Result<CanonicalAnswer> {
    if answers.is_empty() {
        return Err(Error::EmptyInput("answers"));
    }
    let mut tally: BTreeMap<String, (usize, &CanonicalAnswer)> = BTreeMap::new();
    for answer in answers {
        let entry = tally.entry(answer.rendering()).or_insert((0, answer));
        entry.0 += 1;
    }
    let (_, (_, winner)) = tally
        .iter()
        .max_by(|(ka, (ca, _)), (kb, (cb, _))| ca.cmp(cb).then(kb.cmp(ka)))
        .expect("non-empty tally");
    Ok((*winner).clone())
}

/// How rollouts are budgeted for voting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VotingMode {
    /// N independent single attempts per problem.
    IndependentVoting,
    /// N self-rewarding rollouts per problem; early termination makes the
    /// expected attempts per rollout less than the horizon.
    SelfRewardingVoting,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetPoint {
    /// Rollouts (votes) per problem at this point.
    pub votes: usize,
    /// Attempts actually consumed per problem (exact ledger / problems).
    pub expected_samples: f64,
    pub accuracy: f64,
    /// Mean attempts per trajectory at this point.
    pub samples_per_trajectory: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetCurve {
    pub mode: VotingMode,
    pub points: Vec<BudgetPoint>,
}

/// Sweeps voting budgets for both modes over simulated problems. For each
/// budget N, the independent curve votes over N single attempts while the
/// self-rewarding curve votes over the final answers of N rollouts, with the
/// attempts consumed tracked exactly. A sample means one attempt; the
/// self-evaluation tokens are free, which is what makes 2-turn-capped
/// rollouts cost less than two samples on average. Rollouts are nested
/// across budgets (budget N+1 adds one replicate to budget N), so expected
/// samples are strictly increasing along each curve.
pub fn budget_curves(
    profile: &OracleProfile,
    problems: &[Problem],
    budgets: &[usize],
    protocol: &Protocol,
    factory: &RngFactory,
) -> Result<(BudgetCurve, BudgetCurve)> {
    if budgets.is_empty() {
        return Err(Error::EmptyInput("budgets"));
    }
    if problems.is_empty() {
        return Err(Error::EmptyInput("problems"));
    }
    profile.validate()?;
    protocol.validate()?;
    let mut budgets = budgets.to_vec();
    budgets.sort_unstable();
    budgets.dedup();
    let max_budget = *budgets.last().expect("non-empty budgets");

    // Pre-roll the maximum number of replicates once; lower budgets reuse
    // prefixes. The first attempt of rollout r reuses the stream of the
    // independent sample r, so a horizon cap of one makes the curves
    // coincide sample-for-sample.
    let mut independent_answers: Vec<Vec<CanonicalAnswer>> = Vec::with_capacity(problems.len());
    let mut rollout_answers: Vec<Vec<CanonicalAnswer>> = Vec::with_capacity(problems.len());
    let mut rollout_turns: Vec<Vec<usize>> = Vec::with_capacity(problems.len());
    let mut golds: Vec<CanonicalAnswer> = Vec::with_capacity(problems.len());

    for problem in problems {
        golds.push(normalize_answer(&problem.gold_answer));
        let mut singles = Vec::with_capacity(max_budget);
        let mut finals = Vec::with_capacity(max_budget);
        let mut turns = Vec::with_capacity(max_budget);
        for replicate in 0..max_budget {
            let traj = roll_trajectory(
                profile,
                BehaviorMode::SelfRewarding,
                protocol,
                problem,
                factory,
                replicate,
            );
            let first = traj.first_turn().extracted_answer.clone().unwrap_or_default();
            let last = traj.last_turn().extracted_answer.clone().unwrap_or_default();
            singles.push(normalize_answer(&first));
            finals.push(normalize_answer(&last));
            turns.push(traj.horizon());
        }
        independent_answers.push(singles);
        rollout_answers.push(finals);
        rollout_turns.push(turns);
    }

    let vote_accuracy = |answers: &[Vec<CanonicalAnswer>], n: usize| -> Result<f64> {
        let mut correct = 0usize;
        for (per_problem, gold) in answers.iter().zip(golds.iter()) {
            let voted = majority_vote(&per_problem[..n])?;
            correct += crate::verifier::answers_equal(&voted, gold) as usize;
        }
        Ok(correct as f64 / answers.len() as f64)
    };

    let mut independent = BudgetCurve {
        mode: VotingMode::IndependentVoting,
        points: Vec::new(),
    };
    let mut self_rewarding = BudgetCurve {
        mode: VotingMode::SelfRewardingVoting,
        points: Vec::new(),
    };
    for &n in &budgets {
        independent.points.push(BudgetPoint {
            votes: n,
            expected_samples: n as f64,
            accuracy: vote_accuracy(&independent_answers, n)?,
            samples_per_trajectory: 1.0,
        });
        let total_attempts: usize = rollout_turns
            .iter()
            .map(|turns| turns[..n].iter().sum::<usize>())
            .sum();
        let trajectories = n * problems.len();
        self_rewarding.points.push(BudgetPoint {
            votes: n,
            expected_samples: total_attempts as f64 / problems.len() as f64,
            accuracy: vote_accuracy(&rollout_answers, n)?,
            samples_per_trajectory: total_attempts as f64 / trajectories as f64,
        });
    }
    Ok((independent, self_rewarding))
}

/// Synthetic problem set for simulations: small integer gold answers.
pub fn synthetic_problems(count: usize) -> Vec<Problem> {
    (0..count)
        .map(|i| {
            Problem::new(
                format!("p{i:05}"),
                format!("synthetic problem {i}"),
                ((i * 7 + 3) % 50).to_string(),
            )
        })
        .collect()
}
