//! Desk-scale testbed for self-rewarding correction.
//!
//! A single policy answers a math problem, emits a verdict on its own answer
//! ([VERIFY] correct / [VERIFY] wrong) and conditionally revises. This crate
//! implements the full loop at tabular scale, driven by configurable
//! stochastic generator oracles instead of GPU-scale LLMs:
//!
//! - [`model`]: trajectory data model, filter-class classification, JSONL
//!   persistence.
//! - [`verifier`]: boxed-answer extraction and exact answer equivalence.
//! - [`oracle`]: parameterized generator oracles and the two-turn rollout
//!   protocol.
//! - [`pipeline`]: sequential rejection-sampling collection, IFT filtering
//!   and composition, preference-pair construction.
//! - [`mdp`]: exact KL-regularized tabular MDP solver with a grid-search
//!   oracle and a reward-hacking probe.
//! - [`trainer`]: SFT and multi-turn-DPO objectives over tabular softmax
//!   policies with exact gradients and a first-order optimizer.
//! - [`metrics`]: the self-correction metric suite, majority voting, and
//!   inference-budget curves.

pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod mdp;
pub mod oracle;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod verifier;

pub use error::{Error, Result};
pub use model::{
    classify_trajectory, read_trajectories, validate_trajectory, write_trajectories, EvalToken,
    Problem, TerminationReason, Trajectory, TrajectoryClass, TrajectorySource, Turn,
};
pub use policy::PolicyTable;
pub use verifier::{answers_equal, extract_boxed, normalize_answer, verify, CanonicalAnswer};
