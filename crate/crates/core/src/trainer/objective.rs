//! Objective values, exact gradients, and the first-order optimizer.
//!
//! Both objectives operate on tabular softmax policies, so their gradients
//! have the standard form d log pi(c|s) / d logit(s,j) = 1{j=c} - pi(j|s)
//! and are exact; the tests cross-check them against central finite
//! differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::IftDataset;
use crate::policy::PolicyTable;

use super::{SegmentedPair, SegmentedTrajectory, TabularSpace};

/// Numerically stable sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

type Gradient = Vec<Vec<f64>>;

fn zero_gradient(policy: &PolicyTable) -> Gradient {
    policy.logits.iter().map(|row| vec![0.0; row.len()]).collect()
}

/// Adds `scale * d log pi(choice|state) / d logits` into `grad`.
fn accumulate_log_prob_gradient(
    policy: &PolicyTable,
    state: usize,
    choice: usize,
    scale: f64,
    grad: &mut Gradient,
) -> Result<()> {
    let probs = policy.probabilities(state)?;
    for (j, p) in probs.iter().enumerate() {
        let indicator = if j == choice { 1.0 } else { 0.0 };
        grad[state][j] += scale * (indicator - p);
    }
    Ok(())
}

/// Sum of log-probabilities of the trainable segments.
fn log_likelihood(policy: &PolicyTable, segments: &[SegmentedTrajectory]) -> Result<f64> {
    let mut total = 0.0;
    for traj in segments {
        for (state, choice) in traj.trainable() {
            total += policy.log_prob(state, choice)?;
        }
    }
    Ok(total)
}

/// The fine-tuning objective: summed log-likelihood of the class-specific
/// trainable segments (maximized). Returns the value and its exact gradient.
pub fn sft_objective(
    space: &TabularSpace,
    policy: &PolicyTable,
    data: &IftDataset,
    include_a1_for_d3: bool,
) -> Result<(f64, Gradient)> {
    let segments = space.segment_ift(data, include_a1_for_d3)?;
    sft_objective_segmented(policy, &segments)
}

/// Same objective over pre-segmented data.
pub fn sft_objective_segmented(
    policy: &PolicyTable,
    segments: &[SegmentedTrajectory],
) -> Result<(f64, Gradient)> {
    let value = log_likelihood(policy, segments)?;
    let mut grad = zero_gradient(policy);
    for traj in segments {
        for (state, choice) in traj.trainable() {
            accumulate_log_prob_gradient(policy, state, choice, 1.0, &mut grad)?;
        }
    }
    Ok((value, grad))
}

/// Trajectory-level implicit reward: eta times the summed log-ratio of
/// policy to reference over the trainable segments, one term per generated
/// segment, instructions masked.
pub fn implicit_reward(
    policy: &PolicyTable,
    reference: &PolicyTable,
    traj: &SegmentedTrajectory,
    eta: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (state, choice) in traj.trainable() {
        let ref_lp = reference.log_prob(state, choice)?;
        if !ref_lp.is_finite() {
            return Err(Error::ReferenceSingularity {
                state: format!("#{state}"),
                choice: format!("#{choice}"),
            });
        }
        total += policy.log_prob(state, choice)? - ref_lp;
    }
    Ok(eta * total)
}

/// The multi-turn preference loss
/// `-sum log sigmoid(u(winner) - u(loser))`, plus an optional negative
/// log-likelihood term on the winners. Returns the loss (minimized) and its
/// exact gradient.
pub fn mdpo_loss(
    policy: &PolicyTable,
    reference: &PolicyTable,
    pairs: &[SegmentedPair],
    eta: f64,
    nll_coefficient: f64,
) -> Result<(f64, Gradient)> {
    let mut value = 0.0;
    let mut grad = zero_gradient(policy);
    for pair in pairs {
        let delta = implicit_reward(policy, reference, &pair.winner, eta)?
            - implicit_reward(policy, reference, &pair.loser, eta)?;
        value += softplus(-delta);
        // d/d_delta of -log sigmoid(delta) is -(1 - sigmoid(delta)).
        let coefficient = -(1.0 - sigmoid(delta));
        for (state, choice) in pair.winner.trainable() {
            accumulate_log_prob_gradient(policy, state, choice, coefficient * eta, &mut grad)?;
        }
        for (state, choice) in pair.loser.trainable() {
            accumulate_log_prob_gradient(policy, state, choice, -coefficient * eta, &mut grad)?;
        }
        if nll_coefficient > 0.0 {
            for (state, choice) in pair.winner.trainable() {
                value -= nll_coefficient * policy.log_prob(state, choice)?;
                accumulate_log_prob_gradient(
                    policy,
                    state,
                    choice,
                    -nll_coefficient,
                    &mut grad,
                )?;
            }
        }
    }
    Ok((value, grad))
}

/// Mean preference satisfaction sigma(u_w - u_l) over pairs.
pub fn mean_preference_satisfaction(
    policy: &PolicyTable,
    reference: &PolicyTable,
    pairs: &[SegmentedPair],
    eta: f64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("pairs"));
    }
    let mut total = 0.0;
    for pair in pairs {
        let delta = implicit_reward(policy, reference, &pair.winner, eta)?
            - implicit_reward(policy, reference, &pair.loser, eta)?;
        total += sigmoid(delta);
    }
    Ok(total / pairs.len() as f64)
}

/// Which loss the optimizer minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Negative fine-tuning log-likelihood.
    Sft,
    /// The preference loss.
    Mdpo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub nll_coefficient: f64,
    pub seed: u64,
    /// Stop once the gradient norm falls below this.
    pub grad_tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            step_size: 1.0,
            max_iters: 300,
            nll_coefficient: 0.0,
            seed: 0,
            grad_tolerance: 1e-10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_size <= 0.0 {
            return Err(Error::Config("train.step_size must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("train.max_iters must be > 0".into()));
        }
        if self.nll_coefficient < 0.0 {
            return Err(Error::Config("train.nll_coefficient must be >= 0".into()));
        }
        if self.eta <= 0.0 {
            return Err(Error::InvalidEta(self.eta));
        }
        Ok(())
    }
}

/// Training data for [`train`].
pub enum TrainingData<'a> {
    Sft {
        segments: &'a [SegmentedTrajectory],
    },
    Mdpo {
        reference: &'a PolicyTable,
        pairs: &'a [SegmentedPair],
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub policy: PolicyTable,
    /// Loss after each accepted step, starting with the initial loss.
    /// Strictly decreasing past the first entry.
    pub trace: Vec<f64>,
    pub converged: bool,
}

const STEP_FLOOR: f64 = 1e-12;

fn loss_and_grad(
    policy: &PolicyTable,
    data: &TrainingData<'_>,
    config: &TrainConfig,
) -> Result<(f64, Gradient)> {
    match data {
        TrainingData::Sft { segments } => {
            let (value, grad) = sft_objective_segmented(policy, segments)?;
            // Maximize log-likelihood = minimize its negation.
            let neg: Gradient = grad
                .into_iter()
                .map(|row| row.into_iter().map(|g| -g).collect())
                .collect();
            Ok((-value, neg))
        }
        TrainingData::Mdpo { reference, pairs } => {
            mdpo_loss(policy, reference, pairs, config.eta, config.nll_coefficient)
        }
    }
}

fn grad_norm(grad: &Gradient) -> f64 {
    grad.iter()
        .flat_map(|row| row.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Plain gradient descent with backtracking halving: a step is accepted only
/// if it strictly decreases the loss, so the recorded trace is strictly
/// decreasing. Deterministic.
pub fn train(
    initial: &PolicyTable,
    data: &TrainingData<'_>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut policy = initial.clone();
    let (mut loss, mut grad) = loss_and_grad(&policy, data, config)?;
    let mut trace = vec![loss];
    let mut step = config.step_size;
    let mut converged = false;

    for _ in 0..config.max_iters {
        if grad_norm(&grad) < config.grad_tolerance {
            converged = true;
            break;
        }
        let mut accepted = false;
        while step >= STEP_FLOOR {
            let candidate = PolicyTable::new(
                policy
                    .logits
                    .iter()
                    .zip(grad.iter())
                    .map(|(row, grow)| {
                        row.iter().zip(grow.iter()).map(|(l, g)| l - step * g).collect()
                    })
                    .collect(),
            );
            let (candidate_loss, candidate_grad) = loss_and_grad(&candidate, data, config)?;
            if candidate_loss < loss {
                policy = candidate;
                loss = candidate_loss;
                grad = candidate_grad;
                trace.push(loss);
                accepted = true;
                step = (step * 1.5).min(config.step_size * 16.0);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent direction above the floor: either converged flat or
            // genuinely stuck.
            if grad_norm(&grad) < 1e-6 {
                converged = true;
                break;
            }
            return Err(Error::Diverged {
                accepted: trace.len() - 1,
            });
        }
    }

    Ok(TrainOutcome {
        policy,
        trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EvalToken;
    use crate::pipeline::{PairStrategy, PairSuffix, PreferencePair};
    use crate::trainer::{Segment, SegmentRole, TabularSpace};
    use crate::model::Problem;
    use rand::Rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn space() -> TabularSpace {
        let problems = vec![
            Problem::new("p1", "s", "9"),
            Problem::new("p2", "s", "4"),
        ];
        let mut answers: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        answers.insert("p1".into(), ["7", "8"].iter().map(|s| s.to_string()).collect());
        answers.insert("p2".into(), ["5"].iter().map(|s| s.to_string()).collect());
        TabularSpace::build(&problems, &answers)
    }

    fn random_policy(space: &TabularSpace, seed: u64) -> PolicyTable {
        let factory = crate::rng::RngFactory::new(seed);
        let mut rng = factory.stream(&["policy"]);
        PolicyTable::new(
            space
                .arities()
                .iter()
                .map(|&n| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        )
    }

    fn pair(problem: &str, a1: &str, winner_a2: &str, loser_a2: &str) -> PreferencePair {
        PreferencePair {
            problem_id: problem.into(),
            first_answer: a1.into(),
            first_correct: false,
            first_attempt_text: format!("[{problem}-{a1}]"),
            winner: PairSuffix {
                first_eval: EvalToken::VerifyWrong,
                second_answer: Some(winner_a2.into()),
                second_correct: Some(true),
                second_eval: Some(EvalToken::VerifyCorrect),
            },
            loser: PairSuffix {
                first_eval: EvalToken::VerifyWrong,
                second_answer: Some(loser_a2.into()),
                second_correct: Some(false),
                second_eval: Some(EvalToken::VerifyWrong),
            },
            strategy: PairStrategy::M1,
        }
    }

    fn finite_difference(
        policy: &PolicyTable,
        mut f: impl FnMut(&PolicyTable) -> f64,
        step: f64,
    ) -> Vec<Vec<f64>> {
        let mut grads = Vec::new();
        for s in 0..policy.logits.len() {
            let mut row = Vec::new();
            for j in 0..policy.logits[s].len() {
                let mut plus = policy.clone();
                plus.logits[s][j] += step;
                let mut minus = policy.clone();
                minus.logits[s][j] -= step;
                row.push((f(&plus) - f(&minus)) / (2.0 * step));
            }
            grads.push(row);
        }
        grads
    }

    fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for (ra, rn) in analytic.iter().zip(numeric.iter()) {
            for (a, n) in ra.iter().zip(rn.iter()) {
                let denom = 1.0f64.max(a.abs()).max(n.abs());
                worst = worst.max((a - n).abs() / denom);
            }
        }
        worst
    }

    fn synthetic_dataset(_space: &TabularSpace) -> crate::pipeline::IftDataset {
        use crate::model::{TerminationReason, Trajectory, TrajectorySource, Turn};
        let d1 = Trajectory {
            problem_id: "p1".into(),
            turns: vec![
                Turn::new("a $\\boxed{7}$", Some("7".into()), false, EvalToken::VerifyWrong),
                Turn::new("b $\\boxed{9}$", Some("9".into()), true, EvalToken::VerifyCorrect),
            ],
            instructions: vec!["revise_after_wrong".into()],
            terminated_by: TerminationReason::SelfVerifiedCorrect,
            source: TrajectorySource::Simulated,
        };
        let d2 = Trajectory {
            problem_id: "p2".into(),
            turns: vec![
                Turn::new("a $\\boxed{4}$", Some("4".into()), true, EvalToken::VerifyWrong),
                Turn::new("b $\\boxed{4}$", Some("4".into()), true, EvalToken::VerifyCorrect),
            ],
            instructions: vec!["revise_after_wrong".into()],
            terminated_by: TerminationReason::SelfVerifiedCorrect,
            source: TrajectorySource::Simulated,
        };
        let d3 = Trajectory {
            problem_id: "p1".into(),
            turns: vec![Turn::new(
                "a $\\boxed{9}$",
                Some("9".into()),
                true,
                EvalToken::VerifyCorrect,
            )],
            instructions: vec![],
            terminated_by: TerminationReason::SelfVerifiedCorrect,
            source: TrajectorySource::Simulated,
        };
        crate::pipeline::IftDataset {
            d1: vec![d1],
            d2: vec![d2],
            d3: vec![d3],
            c2c: vec![],
        }
        // The dataset references answers registered in `space`.
    }

    #[test]
    fn deterministic_policy_reaches_zero_sft_value() {
        let space = space();
        let data = synthetic_dataset(&space);
        // Push +40 logits onto every observed choice: probabilities ~ 1.
        let segments = space.segment_ift(&data, true).unwrap();
        let mut policy = space.uniform_policy();
        for traj in &segments {
            for (state, choice) in traj.trainable() {
                policy.logits[state][choice] = 40.0;
            }
        }
        let (value, _) = sft_objective(&space, &policy, &data, true).unwrap();
        assert!(value.abs() < 1e-3, "value {value}");
        assert!(value <= 0.0);
    }

    #[test]
    fn single_d3_value_is_log_half_under_uniform() {
        let space = space();
        let data = crate::pipeline::IftDataset {
            d3: synthetic_dataset(&space).d3,
            ..Default::default()
        };
        // Verdict states have two actions, so uniform gives probability 1/2.
        let policy = space.uniform_policy();
        let (value, _) = sft_objective(&space, &policy, &data, false).unwrap();
        assert!((value - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sft_gradient_matches_finite_differences() {
        let space = space();
        let data = synthetic_dataset(&space);
        for seed in 0..20 {
            let policy = random_policy(&space, seed);
            let (_, analytic) = sft_objective(&space, &policy, &data, true).unwrap();
            let numeric = finite_difference(
                &policy,
                |p| sft_objective(&space, p, &data, true).unwrap().0,
                1e-6,
            );
            let err = max_relative_error(&analytic, &numeric);
            assert!(err < 1e-5, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn implicit_reward_is_zero_at_reference_and_linear_in_eta() {
        let space = space();
        let reference = random_policy(&space, 3);
        let pairs = space.segment_pairs(&[pair("p1", "7", "9", "8")]).unwrap();
        let traj = &pairs[0].winner;
        assert!(implicit_reward(&reference, &reference, traj, 0.7)
            .unwrap()
            .abs()
            < 1e-15);

        let policy = random_policy(&space, 4);
        let u1 = implicit_reward(&policy, &reference, traj, 1.0).unwrap();
        let u2 = implicit_reward(&policy, &reference, traj, 2.0).unwrap();
        assert!((u2 - 2.0 * u1).abs() < 1e-12);
    }

    #[test]
    fn hand_built_two_segment_reward_sums_log_ratios() {
        // Two 2-action states with log-ratios 0.7 and 0.3 on the taken
        // choices: u = eta * 1.0.
        let ref_p = 0.4f64;
        let reference = PolicyTable::from_probabilities(&[
            vec![ref_p, 1.0 - ref_p],
            vec![ref_p, 1.0 - ref_p],
        ]);
        let p0 = ref_p * 0.7f64.exp(); // pi(choice) = ref * e^{0.7} < 1
        let p1 = ref_p * 0.3f64.exp();
        let policy = PolicyTable::from_probabilities(&[
            vec![p0, 1.0 - p0],
            vec![p1, 1.0 - p1],
        ]);
        let traj = SegmentedTrajectory {
            segments: vec![
                Segment::Trainable { state: 0, choice: 0 },
                Segment::Trainable { state: 1, choice: 0 },
            ],
            role: SegmentRole::Winner,
        };
        let u = implicit_reward(&policy, &reference, &traj, 1.0).unwrap();
        assert!((u - 1.0).abs() < 1e-12, "u={u}");
    }

    #[test]
    fn reference_singularity_is_an_error() {
        let mut reference = PolicyTable::new(vec![vec![0.0, f64::NEG_INFINITY]]);
        reference.logits[0][1] = f64::NEG_INFINITY;
        let policy = PolicyTable::new(vec![vec![0.0, 0.0]]);
        let traj = SegmentedTrajectory {
            segments: vec![Segment::Trainable { state: 0, choice: 1 }],
            role: SegmentRole::Winner,
        };
        assert!(matches!(
            implicit_reward(&policy, &reference, &traj, 1.0),
            Err(Error::ReferenceSingularity { .. })
        ));
    }

    #[test]
    fn mdpo_loss_at_reference_is_pairs_times_log_two() {
        let space = space();
        let reference = random_policy(&space, 9);
        let pairs = space
            .segment_pairs(&[pair("p1", "7", "9", "8"), pair("p2", "5", "4", "5")])
            .unwrap();
        let (value, _) = mdpo_loss(&reference, &reference, &pairs, 0.5, 0.0).unwrap();
        assert!((value - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn fixed_reward_difference_matches_sigmoid() {
        assert!((softplus(-2.0) - 0.126928).abs() < 1e-5);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mdpo_gradient_matches_finite_differences() {
        let space = space();
        let raw_pairs = vec![pair("p1", "7", "9", "8"), pair("p2", "5", "4", "5")];
        let pairs = space.segment_pairs(&raw_pairs).unwrap();
        for seed in 0..20 {
            let policy = random_policy(&space, 100 + seed);
            let reference = random_policy(&space, 200 + seed);
            for nll in [0.0, 0.3] {
                let (_, analytic) = mdpo_loss(&policy, &reference, &pairs, 0.4, nll).unwrap();
                let numeric = finite_difference(
                    &policy,
                    |p| mdpo_loss(p, &reference, &pairs, 0.4, nll).unwrap().0,
                    1e-6,
                );
                let err = max_relative_error(&analytic, &numeric);
                assert!(err < 1e-5, "seed {seed} nll {nll}: {err}");
            }
        }
    }

    #[test]
    fn bt_probability_is_antisymmetric() {
        let space = space();
        let policy = random_policy(&space, 31);
        let reference = random_policy(&space, 32);
        let pairs = space.segment_pairs(&[pair("p1", "7", "9", "8")]).unwrap();
        let u_w = implicit_reward(&policy, &reference, &pairs[0].winner, 0.5).unwrap();
        let u_l = implicit_reward(&policy, &reference, &pairs[0].loser, 0.5).unwrap();
        let p_forward = sigmoid(u_w - u_l);
        let p_backward = sigmoid(u_l - u_w);
        assert!((p_forward + p_backward - 1.0).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&p_forward));
    }

    #[test]
    fn zero_iterations_returns_the_initial_policy() {
        let space = space();
        let reference = space.uniform_policy();
        let pairs = space.segment_pairs(&[pair("p1", "7", "9", "8")]).unwrap();
        let config = TrainConfig {
            max_iters: 1,
            grad_tolerance: f64::INFINITY, // immediate stop
            ..TrainConfig::default()
        };
        let outcome = train(
            &reference,
            &TrainingData::Mdpo {
                reference: &reference,
                pairs: &pairs,
            },
            &config,
        )
        .unwrap();
        assert_eq!(outcome.policy, reference);
        assert_eq!(outcome.trace.len(), 1);
    }

    #[test]
    fn training_a_single_pair_saturates_preference() {
        let space = space();
        let reference = space.uniform_policy();
        let pairs = space.segment_pairs(&[pair("p1", "7", "9", "8")]).unwrap();
        let config = TrainConfig {
            eta: 0.5,
            step_size: 2.0,
            max_iters: 500,
            ..TrainConfig::default()
        };
        let outcome = train(
            &reference,
            &TrainingData::Mdpo {
                reference: &reference,
                pairs: &pairs,
            },
            &config,
        )
        .unwrap();
        let satisfaction =
            mean_preference_satisfaction(&outcome.policy, &reference, &pairs, 0.5).unwrap();
        assert!(satisfaction >= 0.9, "sigma(delta u) = {satisfaction}");
        for w in outcome.trace.windows(2) {
            assert!(w[1] < w[0], "trace not strictly decreasing: {w:?}");
        }
    }

    #[test]
    fn sft_training_reaches_the_attainable_maximum() {
        let space = space();
        let data = synthetic_dataset(&space);
        let segments = space.segment_ift(&data, true).unwrap();
        let config = TrainConfig {
            step_size: 4.0,
            max_iters: 4000,
            ..TrainConfig::default()
        };
        let outcome = train(
            &space.uniform_policy(),
            &TrainingData::Sft { segments: &segments },
            &config,
        )
        .unwrap();
        // The dataset is realizable by a deterministic policy, so the
        // negative log-likelihood approaches zero.
        let final_loss = *outcome.trace.last().unwrap();
        assert!(final_loss < 1e-3, "loss {final_loss}");
    }
}
