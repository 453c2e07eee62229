//! Differentiable toy policies over a finite candidate set.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arith::question_from_meta;
use crate::filter::tokenize;
use crate::rng::Rng;
use crate::types::{Level, PreferenceSample};

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("non-finite log-probability for candidate {0}")]
    NonFinite(usize),
    #[error("candidate {index} out of range for a set of {len}")]
    BadCandidate { index: usize, len: usize },
    #[error("feature index {index} outside policy dim {dim}")]
    BadFeature { index: usize, dim: usize },
}

/// Sparse feature vector as `(index, value)` pairs.
pub type Features = Vec<(usize, f64)>;

/// Candidate responses for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub features: Vec<Features>,
}

impl Choice {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        Self {
            features: rows
                .iter()
                .map(|r| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect())
                .collect(),
        }
    }
}

pub fn dot(w: &[f64], phi: &Features) -> f64 {
    phi.iter().map(|&(i, v)| w[i] * v).sum()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub trait PolicyHandle {
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// `log π(y | x)` for every candidate of `choice`.
    fn log_probs(&self, choice: &Choice) -> Result<Vec<f64>, PolicyError>;

    /// `∂ log π(y | x) / ∂θ` for candidate `y`.
    fn grad_log_prob(&self, choice: &Choice, y: usize) -> Result<Vec<f64>, PolicyError>;

    fn log_prob(&self, choice: &Choice, y: usize) -> Result<f64, PolicyError> {
        let lp = self.log_probs(choice)?;
        lp.get(y).copied().ok_or(PolicyError::BadCandidate { index: y, len: lp.len() })
    }
}

/// `log π(y|x) = w·φ(x,y) − logsumexp_j w·φ(x,y_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLinearPolicy {
    pub weights: Vec<f64>,
}

impl LogLinearPolicy {
    pub fn zeros(dim: usize) -> Self {
        Self { weights: vec![0.0; dim] }
    }

    pub fn random(dim: usize, scale: f64, rng: &mut Rng) -> Self {
        Self {
            weights: (0..dim).map(|_| scale * rng.normal()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    fn check(&self, choice: &Choice) -> Result<(), PolicyError> {
        let dim = self.dim();
        for phi in &choice.features {
            if let Some(&(index, _)) = phi.iter().find(|(i, _)| *i >= dim) {
                return Err(PolicyError::BadFeature { index, dim });
            }
        }
        Ok(())
    }

    pub fn probs(&self, choice: &Choice) -> Result<Vec<f64>, PolicyError> {
        Ok(self.log_probs(choice)?.into_iter().map(f64::exp).collect())
    }

    /// Highest-scoring candidate; ties go to the lowest index.
    pub fn argmax(&self, choice: &Choice) -> usize {
        let scores: Vec<f64> = choice.features.iter().map(|phi| dot(&self.weights, phi)).collect();
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        best
    }
}

impl PolicyHandle for LogLinearPolicy {
    fn params(&self) -> &[f64] {
        &self.weights
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn log_probs(&self, choice: &Choice) -> Result<Vec<f64>, PolicyError> {
        self.check(choice)?;
        let scores: Vec<f64> = choice.features.iter().map(|phi| dot(&self.weights, phi)).collect();
        let z = log_sum_exp(&scores);
        let lp: Vec<f64> = scores.iter().map(|s| s - z).collect();
        if let Some(i) = lp.iter().position(|x| !x.is_finite()) {
            return Err(PolicyError::NonFinite(i));
        }
        Ok(lp)
    }

    fn grad_log_prob(&self, choice: &Choice, y: usize) -> Result<Vec<f64>, PolicyError> {
        let lp = self.log_probs(choice)?;
        if y >= lp.len() {
            return Err(PolicyError::BadCandidate { index: y, len: lp.len() });
        }
        let mut g = vec![0.0; self.dim()];
        for &(i, v) in &choice.features[y] {
            g[i] += v;
        }
        for (phi, l) in choice.features.iter().zip(&lp) {
            let p = l.exp();
            for &(i, v) in phi {
                g[i] -= p * v;
            }
        }
        Ok(g)
    }
}

/// A preference over a candidate set. Candidate 0 is chosen, 1 is rejected,
/// the rest are alternates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub id: String,
    pub level: Level,
    pub choice: Choice,
}

pub const CHOSEN: usize = 0;
pub const REJECTED: usize = 1;

/// Hashed text features plus two ledger slots for arithmetic samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub hash_dim: usize,
}

impl Default for Featurizer {
    fn default() -> Self {
        Self { hash_dim: 1024 }
    }
}

const LEDGER_SLOTS: usize = 2;
const LEDGER_SCALE: f64 = 0.01;

fn bucket(key: &str, dim: usize) -> usize {
    let d = Sha256::digest(key.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    (u64::from_le_bytes(b) % dim as u64) as usize
}

fn dedup(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v.dedup();
    v
}

fn first_integer(text: &str) -> Option<i64> {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"-?\d+").expect("static regex")).find(text)?.as_str().parse().ok()
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        self.hash_dim + LEDGER_SLOTS
    }

    /// φ(x, y) for one response.
    pub fn features(&self, sample: &PreferenceSample, response: &str) -> Features {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        let resp = dedup(tokenize(response));
        let prompt = dedup(tokenize(&sample.prompt));
        if !resp.is_empty() {
            let w = 1.0 / (resp.len() as f64).sqrt();
            for r in &resp {
                *acc.entry(bucket(&format!("r:{r}"), self.hash_dim)).or_default() += w;
            }
            if !prompt.is_empty() {
                let w = 1.0 / ((resp.len() * prompt.len()) as f64).sqrt();
                for p in &prompt {
                    for r in &resp {
                        *acc.entry(bucket(&format!("x:{p}|{r}"), self.hash_dim)).or_default() += w;
                    }
                }
            }
        }
        if let Some(perceived) = perceived_answer(sample) {
            if let Some(v) = first_integer(response) {
                // Score a·A·v − b·v² peaks at v = A when a = 2b.
                acc.insert(self.hash_dim, LEDGER_SCALE * perceived as f64 * v as f64);
                acc.insert(self.hash_dim + 1, LEDGER_SCALE * (v * v) as f64);
            }
        }
        acc.into_iter().filter(|(_, v)| *v != 0.0).collect()
    }
}

/// Arithmetic answer re-derived from the embedded scene ledgers.
fn perceived_answer(sample: &PreferenceSample) -> Option<i64> {
    let q = question_from_meta(&sample.meta)?;
    let ledgers = sample
        .images
        .iter()
        .map(|im| im.ledger.clone())
        .collect::<Option<Vec<_>>>()?;
    if q.image_indices.iter().any(|&i| i == 0 || i > ledgers.len()) {
        return None;
    }
    Some(crate::arith::ArithQuestion::evaluate(&q.image_indices, q.object_kind, q.operator, &ledgers))
}

/// Build candidate sets: chosen, rejected, then `alternates` responses
/// borrowed from other samples of the same level.
pub fn build_examples(samples: &[PreferenceSample], featurizer: &Featurizer, alternates: usize, rng: &Rng) -> Vec<PreferenceExample> {
    let mut by_level: BTreeMap<Level, Vec<&str>> = BTreeMap::new();
    for s in samples {
        let pool = by_level.entry(s.level).or_default();
        pool.push(&s.chosen);
        pool.push(&s.rejected);
    }
    for pool in by_level.values_mut() {
        pool.sort_unstable();
        pool.dedup();
    }
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut local = rng.substream("alternates", i as u64);
            let pool: Vec<&str> = by_level[&s.level]
                .iter()
                .copied()
                .filter(|r| *r != s.chosen && *r != s.rejected)
                .collect();
            let k = alternates.min(pool.len());
            let mut responses = vec![s.chosen.as_str(), s.rejected.as_str()];
            responses.extend(local.sample_indices(pool.len(), k).into_iter().map(|j| pool[j]));
            PreferenceExample {
                id: s.id.clone(),
                level: s.level,
                choice: Choice {
                    features: responses.iter().map(|r| featurizer.features(s, r)).collect(),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::L2Config;

    fn random_choice(dim: usize, n: usize, rng: &mut Rng) -> Choice {
        Choice::from_dense(&(0..n).map(|_| (0..dim).map(|_| rng.normal()).collect()).collect::<Vec<_>>())
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = Rng::new(0);
        for _ in 0..100 {
            let p = LogLinearPolicy::random(16, 2.0, &mut rng);
            let c = random_choice(16, 4, &mut rng);
            let total: f64 = p.probs(&c).unwrap().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_is_feature_minus_expectation() {
        let mut rng = Rng::new(1);
        let p = LogLinearPolicy::random(8, 1.0, &mut rng);
        let c = random_choice(8, 3, &mut rng);
        let h = 1e-6;
        for y in 0..3 {
            let g = p.grad_log_prob(&c, y).unwrap();
            for k in 0..8 {
                let mut a = p.clone();
                a.weights[k] += h;
                let mut b = p.clone();
                b.weights[k] -= h;
                let fd = (a.log_prob(&c, y).unwrap() - b.log_prob(&c, y).unwrap()) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn large_scores_do_not_overflow() {
        let p = LogLinearPolicy { weights: vec![1e5, -1e5] };
        let c = Choice::from_dense(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let lp = p.log_probs(&c).unwrap();
        assert_eq!(lp[0], 0.0);
        assert_eq!(lp[1], -2e5);
    }

    #[test]
    fn out_of_range_feature_is_an_error() {
        let p = LogLinearPolicy::zeros(2);
        let c = Choice { features: vec![vec![(5, 1.0)]] };
        assert_eq!(p.log_probs(&c).unwrap_err(), PolicyError::BadFeature { index: 5, dim: 2 });
    }

    #[test]
    fn examples_have_distinct_alternates() {
        let cfg = L2Config::default();
        let root = Rng::new(2);
        let samples: Vec<PreferenceSample> = (0..20)
            .filter_map(|i| crate::arith::make_arith_sample(&cfg, &mut root.substream("a", i)).ok())
            .map(|g| g.sample)
            .collect();
        let f = Featurizer::default();
        let ex = build_examples(&samples, &f, 2, &root);
        assert_eq!(ex.len(), samples.len());
        for e in &ex {
            assert_eq!(e.choice.len(), 4);
            assert!(e.choice.features.iter().all(|phi| phi.iter().all(|(i, _)| *i < f.dim())));
        }
        // Ledger slots let a linear scorer prefer the correct count.
        let w_ledger = {
            let mut w = vec![0.0; f.dim()];
            w[f.hash_dim] = 2.0;
            w[f.hash_dim + 1] = -1.0;
            LogLinearPolicy { weights: w }
        };
        let right = ex.iter().filter(|e| w_ledger.argmax(&e.choice) == CHOSEN).count();
        assert_eq!(right, ex.len());
        assert_eq!(build_examples(&samples, &f, 2, &root), ex);
    }
}
