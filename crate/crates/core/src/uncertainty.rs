//! Token-entropy uncertainty and its conversion into per-query trust
//! weights.
//!
//! Entropies are in nats. Hosted backends usually return only the top-k
//! log-probabilities per position; unlisted mass contributes nothing, so
//! truncated distributions under-estimate entropy. The truncation is the
//! same for every client answering a query, and the softmax below only
//! consumes relative differences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stabilizer inside the logarithm.
pub const DEFAULT_EPSILON: f64 = 1e-10;

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 1.0;

const LOGPROB_ROUNDING: f64 = 1e-2;

/// The (possibly truncated) next-token distribution at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub probs: Vec<(u32, f64)>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<(u32, f64)>) -> Result<Self> {
        let dist = TokenDistribution { probs };
        dist.validate()?;
        Ok(dist)
    }

    /// Builds a distribution from probabilities alone, ids assigned in order.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        Self::new(probs.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect())
    }

    /// Builds a distribution from natural-log probabilities.
    /// Providers round log-probabilities, so top-k lists can overshoot a
    /// total of 1 slightly; overshoot up to 1% is renormalized away.
    pub fn from_logprobs(logprobs: &[(u32, f64)]) -> Result<Self> {
        let mut probs: Vec<(u32, f64)> = logprobs.iter().map(|&(id, lp)| (id, lp.exp())).collect();
        let total: f64 = probs.iter().map(|&(_, p)| p).sum();
        if total > 1.0 && total <= 1.0 + LOGPROB_ROUNDING {
            probs.iter_mut().for_each(|(_, p)| *p /= total);
        }
        Self::new(probs)
    }

    /// Sum of the listed probabilities.
    pub fn coverage(&self) -> f64 {
        self.probs.iter().map(|&(_, p)| p).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&(id, p)) = self.probs.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!("token {id} has probability {p} outside [0, 1]")));
        }
        let coverage = self.coverage();
        if coverage > 1.0 + 1e-6 {
            return Err(Error::invalid(format!("token probabilities sum to {coverage} > 1")));
        }
        Ok(())
    }
}

/// Mean entropy of a generated sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub value: f64,
    pub num_tokens: usize,
}

/// Softmax weights over clients for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustWeights {
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl TrustWeights {
    /// Equal weights, the uncertainty-blind baseline.
    pub fn uniform(len: usize) -> Self {
        TrustWeights {
            weights: vec![1.0 / len as f64; len],
            temperature: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// `H = -sum p ln(p + eps)` over the listed tokens.
pub fn token_entropy(dist: &TokenDistribution, epsilon: f64) -> Result<f64> {
    dist.validate()?;
    Ok(-dist.probs.iter().map(|&(_, p)| p * (p + epsilon).ln()).sum::<f64>())
}

/// Arithmetic mean of per-position entropies.
pub fn sequence_uncertainty(dists: &[TokenDistribution], epsilon: f64) -> Result<UncertaintyScore> {
    if dists.is_empty() {
        return Err(Error::invalid(
            "uncertainty is undefined for a response with zero tokens",
        ));
    }
    let total = dists.iter().map(|d| token_entropy(d, epsilon)).sum::<Result<f64>>()?;
    Ok(UncertaintyScore {
        value: total / dists.len() as f64,
        num_tokens: dists.len(),
    })
}

/// Fallback when a backend reports only the sampled tokens'
/// log-probabilities: the negated mean log-probability.
pub fn uncertainty_from_logprobs(chosen: &[f64]) -> Result<UncertaintyScore> {
    if chosen.is_empty() {
        return Err(Error::invalid(
            "uncertainty is undefined for a response with zero tokens",
        ));
    }
    Ok(UncertaintyScore {
        value: (-chosen.iter().sum::<f64>() / chosen.len() as f64).max(0.0),
        num_tokens: chosen.len(),
    })
}

/// `w_i = exp(-u_i / tau) / sum_j exp(-u_j / tau)`, computed with a max
/// shift.
pub fn trust_weights(uncertainties: &[f64], tau: f64) -> Result<TrustWeights> {
    if uncertainties.is_empty() {
        return Err(Error::invalid("trust weights need at least one client"));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if let Some(u) = uncertainties.iter().find(|u| !u.is_finite()) {
        return Err(Error::invalid(format!("non-finite uncertainty {u}")));
    }
    let logits: Vec<f64> = uncertainties.iter().map(|u| -u / tau).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(TrustWeights {
        weights: exps.into_iter().map(|e| e / sum).collect(),
        temperature: tau,
    })
}
