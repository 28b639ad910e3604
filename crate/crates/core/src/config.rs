//! Run configuration: one structured document covering every knob.
//!
//! The CLI deserializes this from a TOML file; every section has defaults,
//! so a missing file or an empty document is a valid (default) run. Unknown
//! keys are rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ControlMode, ProbeConfig, ScRefParams};
use crate::model::Problem;
use crate::oracle::{BehaviorMode, OracleProfile, Protocol};
use crate::pipeline::{CollectionConfig, CompositionPolicy, CompositionRatios};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    /// Master seed; the CLI's --seed flag overrides it.
    pub seed: u64,
    pub profile: OracleProfile,
    pub protocol: Protocol,
    pub dataset: DatasetConfig,
    pub collection: CollectionConfig,
    pub compose: ComposeConfig,
    pub solve: SolveConfig,
    pub probe: ProbeSection,
    pub train: TrainSection,
    pub evaluate: EvaluateConfig,
    pub vote: VoteConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of synthetic problems to generate when no path is given.
    pub problems: usize,
    /// Optional path to a problems JSONL file; takes precedence.
    pub path: Option<String>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            problems: 100,
            path: None,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Vec<Problem>> {
        match &self.path {
            Some(path) => crate::model::read_problems(path),
            None => {
                if self.problems == 0 {
                    return Err(Error::Config("dataset.problems must be >= 1".into()));
                }
                Ok(crate::metrics::synthetic_problems(self.problems))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposeConfig {
    pub policy: CompositionPolicy,
    pub ratios: CompositionRatios,
    pub c2c: usize,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            policy: CompositionPolicy::Balanced,
            ratios: CompositionRatios::default(),
            c2c: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub eta: f64,
    /// Path to a declarative MDP spec file; when absent, a self-correction
    /// instance is built from `refs`.
    pub mdp_path: Option<String>,
    pub mode: ControlMode,
    pub n_prompts: usize,
    pub refs: ScRefParams,
    pub reward: RewardConfig,
    /// Also run the grid-search oracle at this resolution and report the gap.
    pub brute_resolution: Option<f64>,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            mdp_path: None,
            mode: ControlMode::FullControl,
            n_prompts: 1,
            refs: ScRefParams::default(),
            reward: RewardConfig::default(),
            brute_resolution: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub design: RewardKind,
    pub bonus: f64,
    pub base: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    CorrectnessOnly,
    ShapedWrongThenCorrect,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            design: RewardKind::CorrectnessOnly,
            bonus: 1.5,
            base: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn design(&self) -> crate::mdp::RewardDesign {
        match self.design {
            RewardKind::CorrectnessOnly => crate::mdp::RewardDesign::CorrectnessOnly,
            RewardKind::ShapedWrongThenCorrect => crate::mdp::RewardDesign::ShapedWrongThenCorrect {
                bonus: self.bonus,
                base: self.base,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub eta: f64,
    pub bonus: f64,
    pub base: f64,
    pub margin: f64,
    pub n_prompts: usize,
    pub refs: ScRefParams,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            eta: p.eta,
            bonus: p.bonus,
            base: p.base,
            margin: p.margin,
            n_prompts: p.n_prompts,
            refs: p.refs,
        }
    }
}

impl ProbeSection {
    pub fn to_probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            refs: self.refs,
            eta: self.eta,
            bonus: self.bonus,
            base: self.base,
            margin: self.margin,
            n_prompts: self.n_prompts,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub eta: f64,
    pub step_size: f64,
    pub max_iters: usize,
    pub nll_coefficient: f64,
    /// Also fit the first attempt for confirmed-correct trajectories.
    pub include_a1_for_d3: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            eta: t.eta,
            step_size: t.step_size,
            max_iters: t.max_iters,
            nll_coefficient: t.nll_coefficient,
            include_a1_for_d3: true,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            eta: self.eta,
            step_size: self.step_size,
            max_iters: self.max_iters,
            nll_coefficient: self.nll_coefficient,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub mode: BehaviorMode,
    /// Trials for the misleading-reward probe; 0 disables it.
    pub p_cti_trials: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            mode: BehaviorMode::SelfRewarding,
            p_cti_trials: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoteConfig {
    pub budgets: Vec<usize>,
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self {
            budgets: vec![1, 2, 4, 8],
        }
    }
}

impl AppConfig {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.protocol.validate()?;
        self.collection.validate()?;
        if self.solve.eta <= 0.0 {
            return Err(Error::InvalidEta(self.solve.eta));
        }
        if self.probe.eta <= 0.0 {
            return Err(Error::InvalidEta(self.probe.eta));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn defaults_echo_the_collection_run() {
        let c = AppConfig::default();
        assert_eq!(
            (c.collection.n1, c.collection.n2, c.collection.m1, c.collection.m2),
            (50, 8, 8, 4)
        );
        assert_eq!(c.protocol.horizon_cap, 2);
    }

    #[test]
    fn dataset_generates_or_loads() {
        let d = DatasetConfig {
            problems: 7,
            path: None,
        };
        assert_eq!(d.load().unwrap().len(), 7);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("problems.jsonl");
        let problems = crate::metrics::synthetic_problems(3);
        crate::model::write_problems(&path, &problems).unwrap();
        let d = DatasetConfig {
            problems: 0,
            path: Some(path.display().to_string()),
        };
        assert_eq!(d.load().unwrap(), problems);
    }
}
