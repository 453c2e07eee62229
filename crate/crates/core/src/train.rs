//! Minibatch gradient descent for the DPO and SFT objectives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpo::{dpo_loss_and_grad, dpo_margin, kl_diagnostic, sft_loss_and_grad, DpoConfig, ObjectiveError};
use crate::policy::{PolicyError, PolicyHandle, PreferenceExample, CHOSEN, REJECTED};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Dpo,
    Sft,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Dpo => "dpo",
            Objective::Sft => "sft",
        })
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dpo" => Ok(Objective::Dpo),
            "sft" => Ok(Objective::Sft),
            other => Err(format!("unknown objective `{other}` (expected dpo or sft)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dpo: DpoConfig,
    pub objective: Objective,
    /// Plain gradient descent step on the toy policy.
    pub step_size: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dpo: DpoConfig::default(),
            objective: Objective::Dpo,
            step_size: 1.0,
            batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.dpo.validate()?;
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(TrainError::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("no training data")]
    Empty,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Snapshot taken every pass over the data and after the last step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    /// Mean of `β·m`.
    pub mean_margin: f64,
    /// Fraction of examples with `π(y_w|x) > π(y_l|x)`.
    pub preference_accuracy: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective: Objective,
    pub beta: f64,
    pub step_size: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Minibatch loss before each update.
    pub loss_curve: Vec<f64>,
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            out.push_str(&format!("{},{l}\n", i + 1));
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,step,mean_loss,mean_margin,preference_accuracy,mean_kl\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.step, e.mean_loss, e.mean_margin, e.preference_accuracy, e.mean_kl
            ));
        }
        out
    }
}

pub fn loss_and_grad(
    policy: &dyn PolicyHandle,
    reference: &dyn PolicyHandle,
    ex: &PreferenceExample,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    match cfg.objective {
        Objective::Dpo => dpo_loss_and_grad(policy, reference, ex, cfg.dpo.beta),
        Objective::Sft => sft_loss_and_grad(policy, ex),
    }
}

pub fn evaluate(
    policy: &dyn PolicyHandle,
    reference: &dyn PolicyHandle,
    data: &[&PreferenceExample],
    cfg: &TrainConfig,
    epoch: usize,
    step: usize,
) -> Result<EpochStats, ObjectiveError> {
    let n = data.len() as f64;
    let (mut loss, mut margin, mut wins, mut kl) = (0.0, 0.0, 0usize, 0.0);
    for ex in data {
        loss += loss_and_grad(policy, reference, ex, cfg)?.0;
        margin += cfg.dpo.beta * dpo_margin(policy, reference, ex)?;
        let lp = policy.log_probs(&ex.choice)?;
        wins += usize::from(lp[CHOSEN] > lp[REJECTED]);
        kl += kl_diagnostic(policy, reference, &ex.choice)?;
    }
    Ok(EpochStats {
        epoch,
        step,
        mean_loss: loss / n,
        mean_margin: margin / n,
        preference_accuracy: wins as f64 / n,
        mean_kl: kl / n,
    })
}

fn diverged(e: ObjectiveError, step: usize) -> TrainError {
    match e {
        ObjectiveError::NonFinite(_) | ObjectiveError::Policy(PolicyError::NonFinite(_)) => TrainError::Diverged { step },
        other => other.into(),
    }
}

/// Training data with a mixture weight.
#[derive(Debug, Clone, Copy)]
pub struct Source<'a> {
    pub data: &'a [PreferenceExample],
    pub weight: f64,
}

/// Run exactly `steps` updates. Each step draws a source by weight (no draw
/// when there is only one) and takes its next consecutive minibatch; a
/// batch never wraps past the end of its source.
pub fn run_steps(
    policy: &mut dyn PolicyHandle,
    reference: &dyn PolicyHandle,
    sources: &[Source<'_>],
    steps: usize,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let sources: Vec<Source> = sources.iter().copied().filter(|s| s.weight > 0.0).collect();
    if sources.is_empty() || sources.iter().any(|s| s.data.is_empty()) {
        return Err(TrainError::Empty);
    }
    let all: Vec<&PreferenceExample> = sources.iter().flat_map(|s| s.data.iter()).collect();
    let per_epoch = all.len().div_ceil(cfg.batch_size);
    let weights: Vec<f64> = sources.iter().map(|s| s.weight).collect();
    let mut cursors = vec![0usize; sources.len()];
    let mut report = TrainReport {
        objective: cfg.objective,
        beta: cfg.dpo.beta,
        step_size: cfg.step_size,
        batch_size: cfg.batch_size,
        steps,
        loss_curve: Vec::with_capacity(steps),
        epochs: Vec::new(),
    };
    for step in 0..steps {
        let k = if sources.len() == 1 { 0 } else { rng.weighted_index(&weights).expect("positive weights") };
        let data = sources[k].data;
        let start = cursors[k];
        let end = (start + cfg.batch_size).min(data.len());
        cursors[k] = end % data.len();

        let mut grad = vec![0.0; policy.params().len()];
        let mut loss = 0.0;
        for ex in &data[start..end] {
            let (l, g) = loss_and_grad(&*policy, reference, ex, cfg).map_err(|e| diverged(e, step + 1))?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let m = (end - start) as f64;
        loss /= m;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged { step: step + 1 });
        }
        report.loss_curve.push(loss);
        let lr = cfg.step_size / m;
        policy.params_mut().iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g);
        if policy.params().iter().any(|w| !w.is_finite()) {
            return Err(TrainError::Diverged { step: step + 1 });
        }

        let done = step + 1;
        if done % per_epoch == 0 || done == steps {
            let epoch = done.div_ceil(per_epoch);
            report.epochs.push(evaluate(&*policy, reference, &all, cfg, epoch, done)?);
        }
    }
    Ok(report)
}

/// `cfg.dpo.epochs` full passes over `data` in order.
pub fn train(policy: &mut dyn PolicyHandle, reference: &dyn PolicyHandle, data: &[PreferenceExample], cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    cfg.validate()?;
    let steps = cfg.dpo.epochs * data.len().div_ceil(cfg.batch_size);
    run_steps(policy, reference, &[Source { data, weight: 1.0 }], steps, cfg, &mut Rng::new(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Choice, LogLinearPolicy};
    use crate::types::Level;

    /// Chosen carries a fixed "good" direction; rejected its negation.
    fn separable(n: usize, dim: usize, rng: &mut Rng) -> Vec<PreferenceExample> {
        let good: Vec<f64> = (0..dim).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        (0..n)
            .map(|i| {
                let noise = |rng: &mut Rng| (0..dim).map(|_| 0.3 * rng.normal()).collect::<Vec<f64>>();
                let c: Vec<f64> = noise(rng).iter().zip(&good).map(|(a, g)| a + 0.5 * g).collect();
                let r: Vec<f64> = noise(rng).iter().zip(&good).map(|(a, g)| a - 0.5 * g).collect();
                PreferenceExample {
                    id: format!("e{i}"),
                    level: Level::L1,
                    choice: Choice::from_dense(&[c, r, noise(rng), noise(rng)]),
                }
            })
            .collect()
    }

    #[test]
    fn separable_set_reaches_full_accuracy() {
        let data = separable(64, 8, &mut Rng::new(0));
        let mut p = LogLinearPolicy::zeros(8);
        let reference = p.clone();
        let report = train(&mut p, &reference, &data, &TrainConfig::default()).unwrap();
        assert_eq!(report.epochs.len(), 3);
        assert_eq!(report.steps, 12);
        assert_eq!(report.last().unwrap().preference_accuracy, 1.0);
        assert!(report.last().unwrap().mean_kl.is_finite());
        assert!(report.loss_curve[0] > *report.loss_curve.last().unwrap());
    }

    #[test]
    fn sft_report_is_complete() {
        let data = separable(32, 8, &mut Rng::new(1));
        let cfg = TrainConfig {
            objective: Objective::Sft,
            ..TrainConfig::default()
        };
        let mut p = LogLinearPolicy::zeros(8);
        let reference = p.clone();
        let r = train(&mut p, &reference, &data, &cfg).unwrap();
        let last = r.last().unwrap();
        assert!(last.preference_accuracy >= 0.5);
        assert!(last.mean_margin.is_finite() && last.mean_kl >= 0.0);
        assert_eq!(r.loss_csv().lines().count(), r.steps + 1);
    }

    #[test]
    fn divergence_is_caught() {
        let data = vec![PreferenceExample {
            id: "huge".into(),
            level: Level::L1,
            choice: Choice::from_dense(&[vec![1e300], vec![-1e300]]),
        }];
        let cfg = TrainConfig {
            step_size: 1e10,
            objective: Objective::Sft,
            ..TrainConfig::default()
        };
        let mut p = LogLinearPolicy::zeros(1);
        let reference = p.clone();
        assert_eq!(train(&mut p, &reference, &data, &cfg).unwrap_err(), TrainError::Diverged { step: 1 });
    }

    #[test]
    fn empty_data_is_rejected() {
        let mut p = LogLinearPolicy::zeros(2);
        let reference = p.clone();
        assert_eq!(train(&mut p, &reference, &[], &TrainConfig::default()).unwrap_err(), TrainError::Empty);
    }
}
