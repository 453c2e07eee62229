//! Group-relative policy gradient on the candidate-set policy.

use thiserror::Error;

use crate::policy::{Choice, PolicyError, PolicyHandle};
use crate::rng::Rng;

pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("group has {0} members, need at least 2")]
    GroupTooSmall(usize),
    #[error("non-finite reward at group index {0}")]
    NonFiniteReward(usize),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One sampled response and its reward.
#[derive(Debug, Clone)]
pub struct GroupMember<'a> {
    pub choice: &'a Choice,
    pub response: usize,
    pub reward: f64,
}

/// `(r − mean) / (population std + ε)`.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward(i));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect())
}

/// `θ ← θ + lr·Σ A_i·∇log πθ(y_i|x_i)`. Returns the advantages used.
pub fn grpo_step(policy: &mut dyn PolicyHandle, group: &[GroupMember<'_>], lr: f64) -> Result<Vec<f64>, GrpoError> {
    let rewards: Vec<f64> = group.iter().map(|m| m.reward).collect();
    let adv = grpo_advantages(&rewards)?;
    let mut step = vec![0.0; policy.params().len()];
    for (m, a) in group.iter().zip(&adv) {
        if *a == 0.0 {
            continue;
        }
        let g = policy.grad_log_prob(m.choice, m.response)?;
        step.iter_mut().zip(&g).for_each(|(s, gi)| *s += a * gi);
    }
    policy.params_mut().iter_mut().zip(&step).for_each(|(w, s)| *w += lr * s);
    Ok(adv)
}

/// Draw a response index from `π(·|x)`.
pub fn sample_response(policy: &dyn PolicyHandle, choice: &Choice, rng: &mut Rng) -> Result<usize, PolicyError> {
    let p: Vec<f64> = policy.log_probs(choice)?.into_iter().map(f64::exp).collect();
    Ok(rng.weighted_index(&p).unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::LogLinearPolicy;
    use proptest::prelude::*;

    #[test]
    fn equal_rewards_leave_params_alone() {
        let c = Choice::from_dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut p = LogLinearPolicy { weights: vec![0.2, -0.1] };
        let before = p.clone();
        let group: Vec<GroupMember> = (0..4).map(|i| GroupMember { choice: &c, response: i % 2, reward: 0.7 }).collect();
        let adv = grpo_step(&mut p, &group, 1.0).unwrap();
        assert!(adv.iter().all(|a| *a == 0.0));
        assert_eq!(p, before);
    }

    #[test]
    fn two_member_group_gets_unit_advantages() {
        let adv = grpo_advantages(&[0.0, 1.0]).unwrap();
        let oracle = 0.5 / (0.5 + 1e-8);
        assert_eq!(adv, vec![-oracle, oracle]);
    }

    #[test]
    fn tiny_groups_and_bad_rewards() {
        assert_eq!(grpo_advantages(&[1.0]).unwrap_err(), GrpoError::GroupTooSmall(1));
        assert_eq!(grpo_advantages(&[]).unwrap_err(), GrpoError::GroupTooSmall(0));
        assert_eq!(grpo_advantages(&[1.0, f64::NAN]).unwrap_err(), GrpoError::NonFiniteReward(1));
    }

    proptest! {
        #[test]
        fn advantages_sum_to_zero(rs in prop::collection::vec(-100.0f64..100.0, 2..32)) {
            let s: f64 = grpo_advantages(&rs).unwrap().iter().sum();
            prop_assert!(s.abs() < 1e-9);
        }
    }
}
