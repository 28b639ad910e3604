//! Error types shared across the crate.

use crate::model::Violation;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A trajectory failed its structural invariants. Lists every violated
    /// invariant, not just the first.
    #[error("invalid trajectory ({})", format_violations(.0))]
    InvalidTrajectory(Vec<Violation>),

    /// A persisted record could not be decoded.
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A dataset bucket is too small for the requested composition.
    #[error("insufficient {bucket} trajectories: need {needed}, have {available}")]
    Shortfall {
        bucket: &'static str,
        needed: usize,
        available: usize,
    },

    /// A policy table does not cover a state the computation visits.
    #[error("no policy entry for state {state:?}")]
    MissingPolicyEntry { state: String },

    /// KL-regularization strength must be strictly positive.
    #[error("eta must be > 0, got {0}")]
    InvalidEta(f64),

    /// Brute-force enumeration would exceed the grid-point budget.
    #[error("instance too large for grid search: state {state:?} needs {points} grid points (cap {cap})")]
    InstanceTooLarge {
        state: String,
        points: u128,
        cap: u128,
    },

    /// A reference policy assigns zero probability to a taken choice.
    #[error("reference policy has zero probability for choice {choice:?} in state {state:?}")]
    ReferenceSingularity { state: String, choice: String },

    /// A trajectory or pair references a context outside the tabular space.
    #[error("unknown context state {0:?}")]
    UnknownContext(String),

    /// The optimizer could not find a descent step above the step floor.
    #[error("optimizer diverged: step floor reached after {accepted} accepted steps")]
    Diverged { accepted: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Structural problem in an MDP definition.
    #[error("invalid mdp: {0}")]
    InvalidMdp(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}
