//! Scalar rewards for the toy GRPO loop.

use std::collections::BTreeMap;

use regex::Regex;

use crate::filter::tokenize;

pub trait RewardFn {
    fn id(&self) -> &str;
    fn score(&self, prompt: &str, response: &str, gold: &str) -> f64;
}

/// `exp(−(n − target)² / scale)` over the token count `n`.
#[derive(Debug, Clone, Copy)]
pub struct LengthReward {
    pub target_tokens: usize,
    pub scale: f64,
}

impl Default for LengthReward {
    fn default() -> Self {
        Self {
            target_tokens: 20,
            scale: 50.0,
        }
    }
}

impl RewardFn for LengthReward {
    fn id(&self) -> &str {
        "length_based"
    }

    fn score(&self, _prompt: &str, response: &str, _gold: &str) -> f64 {
        let d = tokenize(response).len() as f64 - self.target_tokens as f64;
        (-d * d / self.scale).exp()
    }
}

/// 1 when the whole response matches the template, else 0.
#[derive(Debug, Clone)]
pub struct FormatReward {
    template: Regex,
}

impl FormatReward {
    pub fn new(pattern: &str) -> Result<Self, regex::Error> {
        Ok(Self {
            template: Regex::new(&format!(r"\A(?:{pattern})\z"))?,
        })
    }

    /// Arithmetic answers as generated by this crate.
    pub fn arithmetic() -> Self {
        Self::new(r"There are -?\d+ [a-z0-9-]+ in total\.|The result is -?\d+\.").expect("static pattern")
    }
}

impl RewardFn for FormatReward {
    fn id(&self) -> &str {
        "format_based"
    }

    fn score(&self, _prompt: &str, response: &str, _gold: &str) -> f64 {
        if self.template.is_match(response.trim()) {
            1.0
        } else {
            0.0
        }
    }
}

/// Token-level F1 against the gold answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleReward;

impl RewardFn for RuleReward {
    fn id(&self) -> &str {
        "rule_based"
    }

    fn score(&self, _prompt: &str, response: &str, gold: &str) -> f64 {
        token_f1(response, gold)
    }
}

pub fn token_f1(response: &str, gold: &str) -> f64 {
    let count = |t: &str| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for tok in tokenize(t) {
            *m.entry(tok).or_default() += 1;
        }
        m
    };
    let r = count(response);
    let g = count(gold);
    let overlap: usize = r.iter().map(|(t, n)| (*n).min(g.get(t).copied().unwrap_or(0))).sum();
    if overlap == 0 {
        return 0.0;
    }
    let nr: usize = r.values().sum();
    let ng: usize = g.values().sum();
    let precision = overlap as f64 / nr as f64;
    let recall = overlap as f64 / ng as f64;
    2.0 * precision * recall / (precision + recall)
}
