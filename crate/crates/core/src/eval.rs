//! Multiple-choice scoring.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ImageRef, Level};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
    pub images: Vec<ImageRef>,
    pub question: String,
    pub options: Vec<String>,
    /// 0-based index into `options`.
    pub answer_key: usize,
}

impl EvalItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.options.len() < 2 {
            return Err(EvalError::InvalidItem {
                id: self.id.clone(),
                message: format!("{} options, need at least 2", self.options.len()),
            });
        }
        if self.answer_key >= self.options.len() {
            return Err(EvalError::InvalidItem {
                id: self.id.clone(),
                message: format!("answer key {} out of range", self.answer_key),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no eval items")]
    Empty,
    #[error("eval item `{id}`: {message}")]
    InvalidItem { id: String, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += usize::from(hit);
        self.accuracy = self.correct as f64 / self.total as f64;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalScore {
    pub overall: Tally,
    /// Keyed by level name; items without a level are only in `overall`.
    pub per_level: BTreeMap<String, Tally>,
    /// Ids whose chosen index was not a valid option. Counted as wrong.
    pub out_of_range: Vec<String>,
}

impl EvalScore {
    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy
    }
}

pub fn score_mc<F>(items: &[EvalItem], mut chooser: F) -> Result<EvalScore, EvalError>
where
    F: FnMut(&EvalItem) -> usize,
{
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut overall = Tally::default();
    let mut per_level: BTreeMap<String, Tally> = BTreeMap::new();
    let mut out_of_range = Vec::new();
    for item in items {
        item.validate()?;
        let pick = chooser(item);
        if pick >= item.options.len() {
            log::warn!("chooser picked option {pick} for `{}` with {} options", item.id, item.options.len());
            out_of_range.push(item.id.clone());
        }
        let hit = pick == item.answer_key;
        overall.add(hit);
        if let Some(level) = item.level {
            per_level.entry(level.as_str().to_string()).or_default().add(hit);
        }
    }
    out_of_range.sort();
    Ok(EvalScore {
        overall,
        per_level,
        out_of_range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn items(n: usize, options: usize, rng: &mut Rng) -> Vec<EvalItem> {
        (0..n)
            .map(|i| EvalItem {
                id: format!("q{i}"),
                level: Some(if i % 2 == 0 { Level::L3 } else { Level::L1 }),
                images: vec![],
                question: "Which?".into(),
                options: (1..=options).map(|k| format!("Image {k}")).collect(),
                answer_key: rng.index(options),
            })
            .collect()
    }

    #[test]
    fn oracle_scores_one() {
        let its = items(50, 4, &mut Rng::new(0));
        let s = score_mc(&its, |it| it.answer_key).unwrap();
        assert_eq!(s.accuracy(), 1.0);
        assert_eq!(s.per_level["L3"].total, 25);
    }

    #[test]
    fn random_chooser_near_quarter() {
        let its = items(10_000, 4, &mut Rng::new(1));
        let mut r = Rng::new(2);
        let s = score_mc(&its, |_| r.index(4)).unwrap();
        assert!((s.accuracy() - 0.25).abs() <= 0.02, "{}", s.accuracy());
    }

    #[test]
    fn empty_is_an_error() {
        assert_eq!(score_mc(&[], |_| 0).unwrap_err(), EvalError::Empty);
    }

    #[test]
    fn out_of_range_is_wrong_and_flagged() {
        let its = items(3, 2, &mut Rng::new(0));
        let s = score_mc(&its, |_| 7).unwrap();
        assert_eq!(s.overall.correct, 0);
        assert_eq!(s.out_of_range, vec!["q0", "q1", "q2"]);
    }

    #[test]
    fn permutation_invariant() {
        let mut its = items(200, 3, &mut Rng::new(5));
        let chooser = |it: &EvalItem| it.id.len() % 3;
        let a = score_mc(&its, chooser).unwrap();
        Rng::new(9).shuffle(&mut its);
        let b = score_mc(&its, chooser).unwrap();
        assert_eq!(a, b);
    }
}
