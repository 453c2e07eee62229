//! DPO and SFT objectives with analytic gradients, plus the KL diagnostic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Choice, PolicyError, PolicyHandle, PreferenceExample, CHOSEN, REJECTED};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("policy and reference disagree on the candidate set ({0} vs {1})")]
    CandidateMismatch(usize, usize),
    #[error("candidate set has {0} responses, need chosen and rejected")]
    TooFewCandidates(usize),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
}

/// `log σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    -log_sigmoid(-x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    /// Recorded for reference; the toy trainer uses its own step size.
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 5e-5,
            epochs: 3,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ObjectiveError::BadBeta(self.beta));
        }
        Ok(())
    }
}

fn pair_log_probs(policy: &dyn PolicyHandle, choice: &Choice) -> Result<Vec<f64>, ObjectiveError> {
    let lp = policy.log_probs(choice)?;
    if lp.len() < 2 {
        return Err(ObjectiveError::TooFewCandidates(lp.len()));
    }
    Ok(lp)
}

/// `m = [log πθ(y_w) − log πref(y_w)] − [log πθ(y_l) − log πref(y_l)]`.
pub fn dpo_margin(policy: &dyn PolicyHandle, reference: &dyn PolicyHandle, ex: &PreferenceExample) -> Result<f64, ObjectiveError> {
    let lp = pair_log_probs(policy, &ex.choice)?;
    let lr = pair_log_probs(reference, &ex.choice)?;
    if lp.len() != lr.len() {
        return Err(ObjectiveError::CandidateMismatch(lp.len(), lr.len()));
    }
    let m = (lp[CHOSEN] - lr[CHOSEN]) - (lp[REJECTED] - lr[REJECTED]);
    if !m.is_finite() {
        return Err(ObjectiveError::NonFinite("margin"));
    }
    Ok(m)
}

/// `−log σ(β·m)`.
pub fn dpo_loss(policy: &dyn PolicyHandle, reference: &dyn PolicyHandle, ex: &PreferenceExample, beta: f64) -> Result<f64, ObjectiveError> {
    Ok(softplus(-beta * dpo_margin(policy, reference, ex)?))
}

/// `−β·σ(−β·m)·[∇log πθ(y_w) − ∇log πθ(y_l)]`. The reference is constant.
pub fn dpo_grad(policy: &dyn PolicyHandle, reference: &dyn PolicyHandle, ex: &PreferenceExample, beta: f64) -> Result<Vec<f64>, ObjectiveError> {
    Ok(dpo_loss_and_grad(policy, reference, ex, beta)?.1)
}

pub fn dpo_loss_and_grad(
    policy: &dyn PolicyHandle,
    reference: &dyn PolicyHandle,
    ex: &PreferenceExample,
    beta: f64,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let m = dpo_margin(policy, reference, ex)?;
    let coef = -beta * sigmoid(-beta * m);
    let gw = policy.grad_log_prob(&ex.choice, CHOSEN)?;
    let gl = policy.grad_log_prob(&ex.choice, REJECTED)?;
    let g = gw.iter().zip(&gl).map(|(a, b)| coef * (a - b)).collect();
    Ok((softplus(-beta * m), g))
}

/// `−log πθ(y_w)`.
pub fn sft_loss(policy: &dyn PolicyHandle, ex: &PreferenceExample) -> Result<f64, ObjectiveError> {
    let lp = pair_log_probs(policy, &ex.choice)?;
    Ok(-lp[CHOSEN])
}

pub fn sft_loss_and_grad(policy: &dyn PolicyHandle, ex: &PreferenceExample) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let loss = sft_loss(policy, ex)?;
    let g = policy.grad_log_prob(&ex.choice, CHOSEN)?.into_iter().map(|x| -x).collect();
    Ok((loss, g))
}

/// `Σ_y πθ(y|x)·(log πθ(y|x) − log πref(y|x))` over the candidate set.
pub fn kl_diagnostic(policy: &dyn PolicyHandle, reference: &dyn PolicyHandle, choice: &Choice) -> Result<f64, ObjectiveError> {
    let lp = policy.log_probs(choice)?;
    let lq = reference.log_probs(choice)?;
    if lp.len() != lq.len() {
        return Err(ObjectiveError::CandidateMismatch(lp.len(), lq.len()));
    }
    let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
    if !kl.is_finite() {
        return Err(ObjectiveError::NonFinite("kl"));
    }
    // Rounding can leave a tiny negative residue.
    Ok(kl.max(0.0))
}
