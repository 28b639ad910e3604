//! Tabular softmax policies.
//!
//! A [`PolicyTable`] stores one logit vector per state; probabilities are the
//! per-state softmax of the logits. The table itself is agnostic to what the
//! states mean — the MDP solver indexes it by arena state id, the trainer by
//! its own context registry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Log-sum-exp with the usual max shift. Returns -inf for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Logit table over (state, action); probabilities derived via softmax, so
/// they are strictly positive and sum to one per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub logits: Vec<Vec<f64>>,
}

impl PolicyTable {
    pub fn new(logits: Vec<Vec<f64>>) -> Self {
        Self { logits }
    }

    /// Zero logits (uniform policy) matching the given per-state arities.
    pub fn uniform(arities: &[usize]) -> Self {
        Self {
            logits: arities.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Logits log(p) for the given per-state probability vectors.
    pub fn from_probabilities(probs: &[Vec<f64>]) -> Self {
        Self {
            logits: probs
                .iter()
                .map(|row| row.iter().map(|p| p.ln()).collect())
                .collect(),
        }
    }

    pub fn num_states(&self) -> usize {
        self.logits.len()
    }

    fn row(&self, state: usize) -> Result<&[f64]> {
        self.logits
            .get(state)
            .map(|r| r.as_slice())
            .ok_or_else(|| Error::MissingPolicyEntry {
                state: format!("#{state}"),
            })
    }

    /// log softmax(logits[state])[action].
    pub fn log_prob(&self, state: usize, action: usize) -> Result<f64> {
        let row = self.row(state)?;
        let logit = *row.get(action).ok_or_else(|| Error::MissingPolicyEntry {
            state: format!("#{state}[{action}]"),
        })?;
        Ok(logit - log_sum_exp(row))
    }

    /// Softmax probabilities for one state.
    pub fn probabilities(&self, state: usize) -> Result<Vec<f64>> {
        let row = self.row(state)?;
        let z = log_sum_exp(row);
        Ok(row.iter().map(|l| (l - z).exp()).collect())
    }

    /// KL(self(.|state) || other(.|state)).
    pub fn kl_to(&self, other: &PolicyTable, state: usize) -> Result<f64> {
        let p = self.probabilities(state)?;
        let q = other.probabilities(state)?;
        Ok(kl_divergence(&p, &q))
    }
}

/// KL(p || q) for probability vectors; 0 log 0 taken as 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q.iter())
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}
