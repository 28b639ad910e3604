//! Sequential rejection-sampling data pipeline.
//!
//! Collection runs in three stages: sample initial responses per prompt,
//! sample self-evaluations and keep the first one that agrees with ground
//! truth (dropping responses where none of them do), then sample corrections
//! with a wrong-signal instruction — for correct first attempts too, so that
//! correct-to-correct trajectories exist. Filtering buckets trajectories into
//! the kept classes; composition subsamples buckets to a target ratio.
//!
//! Every stage draws from named substreams of the master seed, so the whole
//! pipeline is byte-reproducible.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    classify_trajectory, EvalToken, Problem, TerminationReason, Trajectory, TrajectoryClass,
    TrajectorySource, Turn,
};
use crate::oracle::{sample_first_attempt, sample_revision, sample_self_evaluation, OracleProfile};
use crate::rng::RngFactory;

/// Knobs for the collection stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionConfig {
    /// Initial responses per prompt.
    pub n1: usize,
    /// Self-evaluations sampled per response (first truth-matching one kept).
    pub n2: usize,
    /// Corrections per wrong-group member.
    pub m1: usize,
    /// Corrections per correct-group member.
    pub m2: usize,
    pub horizon_cap: usize,
    /// Keep at most one trajectory per base sample during filtering.
    pub dedup: bool,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            n1: 50,
            n2: 8,
            m1: 8,
            m2: 4,
            horizon_cap: 2,
            dedup: true,
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n1", self.n1), ("n2", self.n2), ("m1", self.m1), ("m2", self.m2)] {
            if v < 1 {
                return Err(Error::Config(format!("collection.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// A base sample: one initial response plus its kept truth-matching
/// evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseSample {
    pub problem_id: String,
    pub response_index: usize,
    pub turn: Turn,
}

/// Base samples split by ground-truth correctness of the first attempt.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GroupedBase {
    pub g_correct: Vec<BaseSample>,
    pub g_wrong: Vec<BaseSample>,
    /// Responses dropped because no sampled evaluation matched ground truth.
    pub dropped: usize,
    /// Total responses sampled (kept + dropped).
    pub total_responses: usize,
}

impl GroupedBase {
    pub fn attrition_rate(&self) -> f64 {
        if self.total_responses == 0 {
            0.0
        } else {
            self.dropped as f64 / self.total_responses as f64
        }
    }

    /// The correct base samples as one-turn self-verified trajectories.
    /// These are the candidates for the confirmed-correct bucket and precede
    /// the corrections of the same base sample in collection order.
    pub fn correct_base_trajectories(&self) -> Vec<Trajectory> {
        self.g_correct
            .iter()
            .map(|base| Trajectory {
                problem_id: base.problem_id.clone(),
                turns: vec![base.turn.clone()],
                instructions: vec![],
                terminated_by: TerminationReason::SelfVerifiedCorrect,
                source: TrajectorySource::Simulated,
            })
            .collect()
    }
}

/// Stages 1-2: sample `n1` responses per prompt, keep the first of up to `n2`
/// evaluations that matches ground truth, and split by correctness. Attrition
/// is reported, not fatal.
pub fn collect(
    problems: &[Problem],
    profile: &OracleProfile,
    config: &CollectionConfig,
    factory: &RngFactory,
) -> Result<GroupedBase> {
    profile.validate()?;
    config.validate()?;
    let mut grouped = GroupedBase::default();
    for problem in problems {
        for response_index in 0..config.n1 {
            grouped.total_responses += 1;
            let tag = format!("{}-b{}", problem.id, response_index);
            let attempt = {
                let mut rng = factory.problem_stream(&problem.id, response_index, "base_attempt");
                sample_first_attempt(profile, problem, &tag, &mut rng)
            };
            let mut rng = factory.problem_stream(&problem.id, response_index, "base_eval");
            let mut kept = None;
            for _ in 0..config.n2 {
                let eval = sample_self_evaluation(profile, attempt.is_correct, &mut rng);
                if crate::model::eval_matches_truth(eval, attempt.is_correct) {
                    kept = Some(eval);
                    break;
                }
            }
            match kept {
                None => grouped.dropped += 1,
                Some(eval) => {
                    let is_correct = attempt.is_correct;
                    let base = BaseSample {
                        problem_id: problem.id.clone(),
                        response_index,
                        turn: attempt.into_turn(eval),
                    };
                    if is_correct {
                        grouped.g_correct.push(base);
                    } else {
                        grouped.g_wrong.push(base);
                    }
                }
            }
        }
    }
    Ok(grouped)
}

fn problem_by_id<'a>(problems: &'a [Problem], id: &str) -> Result<&'a Problem> {
    problems
        .iter()
        .find(|p| p.id == id)
        .ok_or_else(|| Error::Config(format!("unknown problem id {id:?}")))
}

/// Stage 3: sample exactly `m1` corrections per wrong-group member and `m2`
/// per correct-group member. Correct-group members are told their answer was
/// wrong, which is how correct-to-correct trajectories arise. Output count is
/// exactly `m1 * |g_wrong| + m2 * |g_correct|`.
pub fn sample_corrections(
    grouped: &GroupedBase,
    problems: &[Problem],
    profile: &OracleProfile,
    config: &CollectionConfig,
    factory: &RngFactory,
) -> Result<Vec<Trajectory>> {
    profile.validate()?;
    config.validate()?;
    let mut out = Vec::new();
    let groups = [
        (&grouped.g_wrong, config.m1, false),
        (&grouped.g_correct, config.m2, true),
    ];
    for (group, completions, previous_correct) in groups {
        for base in group.iter() {
            let problem = problem_by_id(problems, &base.problem_id)?;
            for k in 0..completions {
                // The first turn carries the wrong signal that prompted the
                // revision, regardless of the evaluation kept in stage 2.
                let mut first = base.turn.clone();
                first.self_eval = EvalToken::VerifyWrong;
                first.eval_matches_truth =
                    crate::model::eval_matches_truth(first.self_eval, first.is_correct);

                let stage = format!("correction{}-{k}", base.response_index);
                let tag = format!("{}-b{}-c{k}", base.problem_id, base.response_index);
                let mut rng = factory.problem_stream(&base.problem_id, base.response_index, &stage);
                let revision = sample_revision(profile, problem, previous_correct, &tag, &mut rng);
                let revision_correct = revision.is_correct;
                let mut eval_rng = factory.problem_stream(
                    &base.problem_id,
                    base.response_index,
                    &format!("{stage}-eval"),
                );
                let second_eval = sample_self_evaluation(profile, revision_correct, &mut eval_rng);
                let second = revision.into_turn(second_eval);
                let terminated_by = match second_eval {
                    EvalToken::VerifyCorrect => TerminationReason::SelfVerifiedCorrect,
                    EvalToken::VerifyWrong => TerminationReason::HorizonCap,
                    EvalToken::Malformed => TerminationReason::MalformedEval,
                };
                out.push(Trajectory {
                    problem_id: base.problem_id.clone(),
                    turns: vec![first, second],
                    instructions: vec!["revise_after_wrong".into()],
                    terminated_by,
                    source: TrajectorySource::Simulated,
                });
            }
        }
    }
    Ok(out)
}

/// Assembles the filter input in collection order: each correct base's
/// one-turn trajectory precedes the corrections derived from it, so with
/// dedup on, the confirmed-correct trajectory wins for correct bases.
pub fn assemble_candidates(grouped: &GroupedBase, corrections: &[Trajectory]) -> Vec<Trajectory> {
    let mut all = grouped.correct_base_trajectories();
    all.extend(corrections.iter().cloned());
    all
}

/// Filtered instruction-following fine-tuning dataset.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IftDataset {
    /// Wrong first attempt, flagged, fixed.
    pub d1: Vec<Trajectory>,
    /// Correct first attempt, misflagged, still correct.
    pub d2: Vec<Trajectory>,
    /// Correct first attempt, confirmed.
    pub d3: Vec<Trajectory>,
    /// Correct-to-correct augmentations set aside by composition; trained
    /// with the same objective term as d2.
    pub c2c: Vec<Trajectory>,
}

impl IftDataset {
    pub fn len(&self) -> usize {
        self.d1.len() + self.d2.len() + self.d3.len() + self.c2c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter_all(&self) -> impl Iterator<Item = &Trajectory> {
        self.d1
            .iter()
            .chain(self.d2.iter())
            .chain(self.d3.iter())
            .chain(self.c2c.iter())
    }
}

/// Dedup identity of a base sample: the first attempt's text is unique per
/// (problem, base response) by construction.
fn base_key(traj: &Trajectory) -> (String, String) {
    (
        traj.problem_id.clone(),
        traj.first_turn().attempt_text.clone(),
    )
}

/// Buckets trajectories by filter class, dropping discards. With dedup on,
/// the first kept trajectory in input (seeded sampling) order wins per base
/// sample, across all buckets.
pub fn filter_ift(
    trajectories: &[Trajectory],
    horizon_cap: usize,
    dedup: bool,
) -> Result<IftDataset> {
    let mut dataset = IftDataset::default();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for traj in trajectories {
        let class = classify_trajectory(traj, horizon_cap)?;
        if class == TrajectoryClass::Discard {
            continue;
        }
        if dedup && !seen.insert(base_key(traj)) {
            continue;
        }
        match class {
            TrajectoryClass::D1Ift => dataset.d1.push(traj.clone()),
            TrajectoryClass::D2Ift => dataset.d2.push(traj.clone()),
            TrajectoryClass::D3Ift => dataset.d3.push(traj.clone()),
            TrajectoryClass::Discard => unreachable!(),
        }
    }
    Ok(dataset)
}

/// Target composition of the fine-tuning set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompositionPolicy {
    /// Equal d1 and d3 counts (the min of the two).
    Balanced,
    /// Keep all of d1, subsample d3 below it (paper run: 125K/60K).
    MoreIncorrect,
    /// Keep all of d1, subsample d3 above it (paper run: 125K/180K).
    MoreCorrect,
}

/// Ratio knobs for the unbalanced policies, expressed as (d1 parts, d3 parts).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositionRatios {
    pub more_incorrect: (usize, usize),
    pub more_correct: (usize, usize),
}

impl Default for CompositionRatios {
    fn default() -> Self {
        Self {
            more_incorrect: (125, 60),
            more_correct: (125, 180),
        }
    }
}

/// Uniform seeded choice of `count` indices out of `len`, in ascending order.
fn seeded_indices(len: usize, count: usize, factory: &RngFactory, stage: &str) -> Vec<usize> {
    debug_assert!(count <= len);
    // Seeded partial Fisher-Yates over indices keeps selection uniform and
    // reproducible.
    let mut rng = factory.stream(&["compose", stage]);
    let mut indices: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

fn seeded_subsample(
    items: &[Trajectory],
    count: usize,
    factory: &RngFactory,
    stage: &str,
) -> Vec<Trajectory> {
    if count == items.len() {
        return items.to_vec();
    }
    seeded_indices(items.len(), count, factory, stage)
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}

/// Composes a dataset to the requested policy: subsamples d3 against d1 at
/// the policy ratio and sets aside exactly `c2c_count` correct-to-correct
/// trajectories from the d2 pool (target semantics, so recomposition with the
/// same seed is idempotent). Subsampling is seeded-uniform.
pub fn compose_dataset(
    ift: &IftDataset,
    policy: CompositionPolicy,
    ratios: &CompositionRatios,
    c2c_count: usize,
    factory: &RngFactory,
) -> Result<IftDataset> {
    let d1_avail = ift.d1.len();
    let d3_avail = ift.d3.len();
    let (d1_target, d3_target) = match policy {
        CompositionPolicy::Balanced => {
            let m = d1_avail.min(d3_avail);
            (m, m)
        }
        CompositionPolicy::MoreIncorrect => {
            let (a, b) = ratios.more_incorrect;
            (d1_avail, d1_avail * b / a)
        }
        CompositionPolicy::MoreCorrect => {
            let (a, b) = ratios.more_correct;
            (d1_avail, d1_avail * b / a)
        }
    };
    if d3_target > d3_avail {
        return Err(Error::Shortfall {
            bucket: "d3",
            needed: d3_target,
            available: d3_avail,
        });
    }
    let (c2c, d2) = if ift.c2c.len() == c2c_count {
        (ift.c2c.clone(), ift.d2.clone())
    } else {
        let pool: Vec<Trajectory> = ift.c2c.iter().chain(ift.d2.iter()).cloned().collect();
        if c2c_count > pool.len() {
            return Err(Error::Shortfall {
                bucket: "c2c",
                needed: c2c_count,
                available: pool.len(),
            });
        }
        let chosen: HashSet<usize> = seeded_indices(pool.len(), c2c_count, factory, "c2c")
            .into_iter()
            .collect();
        let mut c2c = Vec::with_capacity(c2c_count);
        let mut d2 = Vec::with_capacity(pool.len() - c2c_count);
        for (i, traj) in pool.into_iter().enumerate() {
            if chosen.contains(&i) {
                c2c.push(traj);
            } else {
                d2.push(traj);
            }
        }
        (c2c, d2)
    };

    Ok(IftDataset {
        d1: seeded_subsample(&ift.d1, d1_target, factory, "d1"),
        d2,
        d3: seeded_subsample(&ift.d3, d3_target, factory, "d3"),
        c2c,
    })
}

/// Ranking strategy a preference pair belongs to. The two reward-signal
/// comparisons are merged into M3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    M1,
    M2,
    M3,
}

/// A trajectory suffix after the shared (problem, first attempt) prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSuffix {
    pub first_eval: EvalToken,
    /// Second-turn answer and its correctness; absent when the trajectory
    /// stopped after the first evaluation.
    pub second_answer: Option<String>,
    pub second_correct: Option<bool>,
    pub second_eval: Option<EvalToken>,
}

impl PairSuffix {
    fn of(traj: &Trajectory) -> Option<Self> {
        let first = traj.first_turn();
        if first.self_eval == EvalToken::Malformed {
            return None;
        }
        match traj.turns.len() {
            1 => Some(Self {
                first_eval: first.self_eval,
                second_answer: None,
                second_correct: None,
                second_eval: None,
            }),
            2 => {
                let second = &traj.turns[1];
                Some(Self {
                    first_eval: first.self_eval,
                    second_answer: second.extracted_answer.clone(),
                    second_correct: Some(second.is_correct),
                    second_eval: Some(second.self_eval),
                })
            }
            _ => None,
        }
    }

    pub fn says_wrong_and(&self, second_correct: bool) -> bool {
        self.first_eval == EvalToken::VerifyWrong && self.second_correct == Some(second_correct)
    }

    pub fn says_correct_and_stops(&self) -> bool {
        self.first_eval == EvalToken::VerifyCorrect && self.second_correct.is_none()
    }
}

/// A preference pair over trajectory suffixes sharing (problem, first
/// attempt).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub problem_id: String,
    pub first_answer: String,
    pub first_correct: bool,
    pub first_attempt_text: String,
    pub winner: PairSuffix,
    pub loser: PairSuffix,
    pub strategy: PairStrategy,
}

/// Machine check of the ranking patterns: does `winner` strictly dominate
/// `loser` for a first attempt of the given correctness?
pub fn pattern_dominates(first_correct: bool, winner: &PairSuffix, loser: &PairSuffix) -> bool {
    if first_correct {
        // (correct a1, No, correct a2) > (correct a1, No, wrong a2)
        // (correct a1, Yes)            > (correct a1, No, wrong a2)
        (winner.says_wrong_and(true) && loser.says_wrong_and(false))
            || (winner.says_correct_and_stops() && loser.says_wrong_and(false))
    } else {
        // (wrong a1, No, correct a2) > (wrong a1, No, wrong a2)
        // (wrong a1, No, correct a2) > (wrong a1, Yes)
        (winner.says_wrong_and(true) && loser.says_wrong_and(false))
            || (winner.says_wrong_and(true) && loser.says_correct_and_stops())
    }
}

/// Builds preference pairs from trajectories grouped by (problem, first
/// attempt). Emits exactly the four ranking patterns; the ambiguous
/// comparison between a wrong unfixed revision and a wrong confirmation is
/// never emitted.
pub fn build_mdpo_pairs(trajectories: &[Trajectory]) -> Vec<PreferencePair> {
    let mut groups: BTreeMap<(String, String), Vec<&Trajectory>> = BTreeMap::new();
    for traj in trajectories {
        groups.entry(base_key(traj)).or_default().push(traj);
    }

    let mut pairs = Vec::new();
    for ((problem_id, _), members) in groups {
        let first = members[0].first_turn();
        let first_correct = first.is_correct;
        let first_answer = first.extracted_answer.clone().unwrap_or_default();
        let first_attempt_text = first.attempt_text.clone();
        let suffixes: Vec<PairSuffix> = members.iter().filter_map(|t| PairSuffix::of(t)).collect();

        for winner in &suffixes {
            for loser in &suffixes {
                if winner == loser {
                    continue;
                }
                let strategy = if first_correct {
                    if winner.says_wrong_and(true) && loser.says_wrong_and(false) {
                        Some(PairStrategy::M2)
                    } else if winner.says_correct_and_stops() && loser.says_wrong_and(false) {
                        Some(PairStrategy::M3)
                    } else {
                        None
                    }
                } else if winner.says_wrong_and(true) && loser.says_wrong_and(false) {
                    Some(PairStrategy::M1)
                } else if winner.says_wrong_and(true) && loser.says_correct_and_stops() {
                    Some(PairStrategy::M3)
                } else {
                    None
                };
                if let Some(strategy) = strategy {
                    pairs.push(PreferencePair {
                        problem_id: problem_id.clone(),
                        first_answer: first_answer.clone(),
                        first_correct,
                        first_attempt_text: first_attempt_text.clone(),
                        winner: winner.clone(),
                        loser: loser.clone(),
                        strategy,
                    });
                }
            }
        }
    }
    pairs
}

/// Writes preference pairs one JSON record per line.
pub fn write_pairs<P: AsRef<std::path::Path>>(path: P, pairs: &[PreferencePair]) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut writer = std::io::BufWriter::new(file);
    for pair in pairs {
        let line = serde_json::to_string(pair).expect("pair serializes");
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

/// Reads a line-delimited preference-pair file.
pub fn read_pairs<P: AsRef<std::path::Path>>(path: P) -> Result<Vec<PreferencePair>> {
    use std::io::BufRead;
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: idx + 1,
            message: e.to_string(),
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_trajectory;

    fn problems(n: usize) -> Vec<Problem> {
        (0..n)
            .map(|i| {
                Problem::new(format!("p{i:03}"), format!("problem {i}"), (i + 3).to_string())
            })
            .collect()
    }

    fn perfect_profile() -> OracleProfile {
        OracleProfile {
            p1: 0.5,
            rm_tpr: 1.0,
            rm_tnr: 1.0,
            q_fix: 0.7,
            p_flip: 0.3,
            malformed_rate: 0.0,
            answer_space: 3,
        }
    }

    #[test]
    fn perfect_rm_has_zero_attrition() {
        let problems = problems(4);
        let config = CollectionConfig {
            n1: 10,
            ..CollectionConfig::default()
        };
        let grouped = collect(&problems, &perfect_profile(), &config, &RngFactory::new(5)).unwrap();
        assert_eq!(grouped.dropped, 0);
        assert_eq!(
            grouped.g_correct.len() + grouped.g_wrong.len(),
            config.n1 * problems.len()
        );
    }

    #[test]
    fn hopeless_rm_drops_everything() {
        let problems = problems(2);
        let profile = OracleProfile {
            rm_tpr: 0.0,
            rm_tnr: 0.0,
            malformed_rate: 0.0,
            ..perfect_profile()
        };
        let config = CollectionConfig {
            n1: 5,
            ..CollectionConfig::default()
        };
        let grouped = collect(&problems, &profile, &config, &RngFactory::new(5)).unwrap();
        assert_eq!(grouped.dropped, grouped.total_responses);
        assert!(grouped.g_correct.is_empty() && grouped.g_wrong.is_empty());
    }

    #[test]
    fn coin_flip_rm_attrition_matches_geometric_bound() {
        let problems = problems(20);
        let profile = OracleProfile {
            rm_tpr: 0.5,
            rm_tnr: 0.5,
            malformed_rate: 0.0,
            ..perfect_profile()
        };
        let config = CollectionConfig {
            n1: 50,
            n2: 8,
            ..CollectionConfig::default()
        };
        let grouped = collect(&problems, &profile, &config, &RngFactory::new(11)).unwrap();
        let expected = 0.5f64.powi(8);
        let n = grouped.total_responses as f64;
        let sigma = (expected * (1.0 - expected) / n).sqrt();
        assert!(
            (grouped.attrition_rate() - expected).abs() <= 3.0 * sigma,
            "attrition {}",
            grouped.attrition_rate()
        );
    }

    #[test]
    fn correction_count_law() {
        let problems = problems(3);
        let config = CollectionConfig {
            n1: 10,
            ..CollectionConfig::default()
        };
        let factory = RngFactory::new(23);
        let grouped = collect(&problems, &perfect_profile(), &config, &factory).unwrap();
        let corrections =
            sample_corrections(&grouped, &problems, &perfect_profile(), &config, &factory).unwrap();
        assert_eq!(
            corrections.len(),
            config.m1 * grouped.g_wrong.len() + config.m2 * grouped.g_correct.len()
        );
        for t in &corrections {
            assert!(validate_trajectory(t).is_empty(), "{t:?}");
            assert_eq!(t.horizon(), 2);
            assert_eq!(t.first_turn().self_eval, EvalToken::VerifyWrong);
        }

        let empty = GroupedBase::default();
        let none =
            sample_corrections(&empty, &problems, &perfect_profile(), &config, &factory).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn paper_scale_count_example() {
        // 10 wrong and 5 correct bases with the default completions (8, 4).
        let grouped = GroupedBase {
            g_wrong: fabricate_bases(10, false),
            g_correct: fabricate_bases(5, true),
            dropped: 0,
            total_responses: 15,
        };
        let problems = vec![Problem::new("p000", "s", "3")];
        let config = CollectionConfig::default();
        let corrections = sample_corrections(
            &grouped,
            &problems,
            &perfect_profile(),
            &config,
            &RngFactory::new(1),
        )
        .unwrap();
        assert_eq!(corrections.len(), 100);
    }

    fn fabricate_bases(n: usize, correct: bool) -> Vec<BaseSample> {
        (0..n)
            .map(|i| BaseSample {
                problem_id: "p000".into(),
                response_index: if correct { 1000 + i } else { i },
                turn: Turn::new(
                    format!(
                        "[p000-b{i}-{correct}] answer $\\boxed{{{}}}$.",
                        if correct { 3 } else { 4 }
                    ),
                    Some(if correct { "3" } else { "4" }.to_string()),
                    correct,
                    if correct {
                        EvalToken::VerifyCorrect
                    } else {
                        EvalToken::VerifyWrong
                    },
                ),
            })
            .collect()
    }

    fn pipeline_raw(dedup: bool, seed: u64) -> (Vec<Trajectory>, Vec<Problem>) {
        let problems = problems(6);
        let config = CollectionConfig {
            n1: 8,
            dedup,
            ..CollectionConfig::default()
        };
        let profile = OracleProfile {
            p1: 0.5,
            rm_tpr: 0.9,
            rm_tnr: 0.9,
            q_fix: 0.7,
            p_flip: 0.25,
            malformed_rate: 0.02,
            answer_space: 3,
        };
        let factory = RngFactory::new(seed);
        let grouped = collect(&problems, &profile, &config, &factory).unwrap();
        let corrections =
            sample_corrections(&grouped, &problems, &profile, &config, &factory).unwrap();
        (assemble_candidates(&grouped, &corrections), problems)
    }

    fn pipeline_dataset(dedup: bool, seed: u64) -> (IftDataset, Vec<Problem>) {
        let (all, problems) = pipeline_raw(dedup, seed);
        (filter_ift(&all, 2, dedup).unwrap(), problems)
    }

    #[test]
    fn filter_buckets_by_class() {
        let (ds, _) = pipeline_dataset(false, 31);
        assert!(!ds.d1.is_empty());
        assert!(!ds.d2.is_empty());
        assert!(!ds.d3.is_empty());
        for t in &ds.d1 {
            assert_eq!(classify_trajectory(t, 2).unwrap(), TrajectoryClass::D1Ift);
        }
        for t in &ds.d2 {
            assert_eq!(classify_trajectory(t, 2).unwrap(), TrajectoryClass::D2Ift);
        }
        for t in &ds.d3 {
            assert_eq!(classify_trajectory(t, 2).unwrap(), TrajectoryClass::D3Ift);
        }
    }

    #[test]
    fn dedup_keeps_at_most_one_per_base() {
        let (ds, _) = pipeline_dataset(true, 31);
        let mut keys = HashSet::new();
        for t in ds.iter_all() {
            assert!(keys.insert(base_key(t)), "duplicate base {:?}", base_key(t));
        }
        // With dedup on, a correct base's one-turn trajectory precedes its
        // corrections in collection order, so no correction of a correct
        // base survives and d2 ends up empty.
        assert!(ds.d2.is_empty());
    }

    #[test]
    fn dedup_off_keeps_multiple_corrections_per_base() {
        let (dedup_on, _) = pipeline_dataset(true, 31);
        let (dedup_off, _) = pipeline_dataset(false, 31);
        assert!(dedup_off.d1.len() >= dedup_on.d1.len());
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for t in dedup_off.d1.iter() {
            *counts.entry(base_key(t)).or_default() += 1;
        }
        assert!(counts.values().any(|&c| c > 1));
    }

    #[test]
    fn balanced_composition_uses_min_rule() {
        let (ds, _) = pipeline_dataset(false, 47);
        let factory = RngFactory::new(7);
        let composed = compose_dataset(
            &ds,
            CompositionPolicy::Balanced,
            &CompositionRatios::default(),
            0,
            &factory,
        )
        .unwrap();
        let m = ds.d1.len().min(ds.d3.len());
        assert_eq!(composed.d1.len(), m);
        assert_eq!(composed.d3.len(), m);
    }

    #[test]
    fn more_incorrect_matches_paper_ratio() {
        // Desk-scale version of the 125K/60K run: (250, 300) -> (250, 120).
        let ds = IftDataset {
            d1: synthetic_class_trajs(250, false),
            d3: synthetic_class_trajs(300, true),
            ..IftDataset::default()
        };
        let composed = compose_dataset(
            &ds,
            CompositionPolicy::MoreIncorrect,
            &CompositionRatios::default(),
            0,
            &RngFactory::new(3),
        )
        .unwrap();
        assert_eq!(composed.d1.len(), 250);
        assert_eq!(composed.d3.len(), 120);
    }

    #[test]
    fn more_correct_needs_a_large_enough_pool() {
        let ds = IftDataset {
            d1: synthetic_class_trajs(100, false),
            d3: synthetic_class_trajs(200, true),
            ..IftDataset::default()
        };
        // 100 * 180 / 125 = 144 <= 200.
        let composed = compose_dataset(
            &ds,
            CompositionPolicy::MoreCorrect,
            &CompositionRatios::default(),
            0,
            &RngFactory::new(3),
        )
        .unwrap();
        assert_eq!(composed.d3.len(), 144);

        let small = IftDataset {
            d1: synthetic_class_trajs(100, false),
            d3: synthetic_class_trajs(120, true),
            ..IftDataset::default()
        };
        let err = compose_dataset(
            &small,
            CompositionPolicy::MoreCorrect,
            &CompositionRatios::default(),
            0,
            &RngFactory::new(3),
        )
        .unwrap_err();
        match err {
            Error::Shortfall {
                bucket,
                needed,
                available,
            } => {
                assert_eq!(bucket, "d3");
                assert_eq!((needed, available), (144, 120));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn c2c_target_is_exact_and_shortfall_is_reported() {
        let (ds, _) = pipeline_dataset(false, 47);
        assert!(ds.d2.len() >= 3);
        let composed = compose_dataset(
            &ds,
            CompositionPolicy::Balanced,
            &CompositionRatios::default(),
            3,
            &RngFactory::new(9),
        )
        .unwrap();
        assert_eq!(composed.c2c.len(), 3);
        assert_eq!(composed.d2.len(), ds.d2.len() - 3);

        let err = compose_dataset(
            &ds,
            CompositionPolicy::Balanced,
            &CompositionRatios::default(),
            ds.d2.len() + 1,
            &RngFactory::new(9),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shortfall { .. }));
    }

    #[test]
    fn composition_is_idempotent_under_same_seed() {
        let (ds, _) = pipeline_dataset(false, 47);
        let factory = RngFactory::new(21);
        let once = compose_dataset(
            &ds,
            CompositionPolicy::Balanced,
            &CompositionRatios::default(),
            2,
            &factory,
        )
        .unwrap();
        let twice = compose_dataset(
            &once,
            CompositionPolicy::Balanced,
            &CompositionRatios::default(),
            2,
            &factory,
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&once).unwrap(),
            serde_json::to_string(&twice).unwrap()
        );
    }

    fn synthetic_class_trajs(n: usize, first_correct: bool) -> Vec<Trajectory> {
        (0..n)
            .map(|i| {
                let first = Turn::new(
                    format!(
                        "[syn{i}-{first_correct}] $\\boxed{{{}}}$.",
                        if first_correct { 3 } else { 5 }
                    ),
                    Some(if first_correct { "3" } else { "5" }.to_string()),
                    first_correct,
                    if first_correct {
                        EvalToken::VerifyCorrect
                    } else {
                        EvalToken::VerifyWrong
                    },
                );
                if first_correct {
                    Trajectory {
                        problem_id: "p000".into(),
                        turns: vec![first],
                        instructions: vec![],
                        terminated_by: TerminationReason::SelfVerifiedCorrect,
                        source: TrajectorySource::Simulated,
                    }
                } else {
                    let second = Turn::new(
                        "$\\boxed{3}$.",
                        Some("3".to_string()),
                        true,
                        EvalToken::VerifyCorrect,
                    );
                    Trajectory {
                        problem_id: "p000".into(),
                        turns: vec![first, second],
                        instructions: vec!["revise_after_wrong".into()],
                        terminated_by: TerminationReason::SelfVerifiedCorrect,
                        source: TrajectorySource::Simulated,
                    }
                }
            })
            .collect()
    }

    fn pair_traj(
        first_correct: bool,
        first_eval: EvalToken,
        second: Option<(bool, &str)>,
    ) -> Trajectory {
        let first = Turn::new(
            format!("[base] $\\boxed{{{}}}$.", if first_correct { 3 } else { 5 }),
            Some(if first_correct { "3" } else { "5" }.to_string()),
            first_correct,
            first_eval,
        );
        match second {
            None => Trajectory {
                problem_id: "p000".into(),
                turns: vec![first],
                instructions: vec![],
                terminated_by: match first_eval {
                    EvalToken::VerifyCorrect => TerminationReason::SelfVerifiedCorrect,
                    EvalToken::VerifyWrong => TerminationReason::HorizonCap,
                    EvalToken::Malformed => TerminationReason::MalformedEval,
                },
                source: TrajectorySource::Simulated,
            },
            Some((correct, answer)) => {
                let second = Turn::new(
                    format!("$\\boxed{{{answer}}}$."),
                    Some(answer.to_string()),
                    correct,
                    if correct {
                        EvalToken::VerifyCorrect
                    } else {
                        EvalToken::VerifyWrong
                    },
                );
                Trajectory {
                    problem_id: "p000".into(),
                    turns: vec![first, second],
                    instructions: vec!["revise_after_wrong".into()],
                    terminated_by: if correct {
                        TerminationReason::SelfVerifiedCorrect
                    } else {
                        TerminationReason::HorizonCap
                    },
                    source: TrajectorySource::Simulated,
                }
            }
        }
    }

    #[test]
    fn mdpo_pair_patterns() {
        // Wrong first attempt: fixed vs unfixed revision -> one M1 pair.
        let group = vec![
            pair_traj(false, EvalToken::VerifyWrong, Some((true, "3"))),
            pair_traj(false, EvalToken::VerifyWrong, Some((false, "6"))),
        ];
        let pairs = build_mdpo_pairs(&group);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].strategy, PairStrategy::M1);
        assert!(pairs[0].winner.says_wrong_and(true));

        // Correct first attempt: confirmation vs broken revision -> M3.
        let group = vec![
            pair_traj(true, EvalToken::VerifyCorrect, None),
            pair_traj(true, EvalToken::VerifyWrong, Some((false, "6"))),
        ];
        let pairs = build_mdpo_pairs(&group);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].strategy, PairStrategy::M3);
        assert!(pairs[0].winner.says_correct_and_stops());

        // Ambiguous comparison is never emitted.
        let group = vec![
            pair_traj(false, EvalToken::VerifyWrong, Some((false, "6"))),
            pair_traj(false, EvalToken::VerifyCorrect, None),
        ];
        assert!(build_mdpo_pairs(&group).is_empty());

        // Wrong first attempt: fixed revision vs wrong confirmation -> M3.
        let group = vec![
            pair_traj(false, EvalToken::VerifyWrong, Some((true, "3"))),
            pair_traj(false, EvalToken::VerifyCorrect, None),
        ];
        let pairs = build_mdpo_pairs(&group);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].strategy, PairStrategy::M3);

        // Correct first: kept-correct revision vs broken revision -> M2.
        let group = vec![
            pair_traj(true, EvalToken::VerifyWrong, Some((true, "3"))),
            pair_traj(true, EvalToken::VerifyWrong, Some((false, "6"))),
        ];
        let pairs = build_mdpo_pairs(&group);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].strategy, PairStrategy::M2);
    }

    #[test]
    fn every_emitted_pair_dominates() {
        // Pairs are built from the raw candidate pool: losers are discard
        // patterns that the IFT filter would drop.
        let (all, _) = pipeline_raw(false, 53);
        let pairs = build_mdpo_pairs(&all);
        assert!(!pairs.is_empty());
        for pair in &pairs {
            assert!(
                pattern_dominates(pair.first_correct, &pair.winner, &pair.loser),
                "{pair:?}"
            );
            assert_ne!(pair.winner, pair.loser);
        }
    }

    #[test]
    fn pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        let group = vec![
            pair_traj(false, EvalToken::VerifyWrong, Some((true, "3"))),
            pair_traj(false, EvalToken::VerifyWrong, Some((false, "6"))),
        ];
        let pairs = build_mdpo_pairs(&group);
        write_pairs(&path, &pairs).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), pairs);
    }

    #[test]
    fn end_to_end_determinism() {
        let (a, _) = pipeline_dataset(true, 99);
        let (b, _) = pipeline_dataset(true, 99);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
