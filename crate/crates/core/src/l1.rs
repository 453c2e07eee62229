//! Single-image VQA records lifted into multi-image samples by surrounding the
//! target with unrelated distractor images.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;
use crate::types::{normalize_whitespace, ImageRef, Level, PreferenceSample, MAX_IMAGES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub image: ImageRef,
    pub question: String,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrong_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
}

impl VqaRecord {
    pub fn validate(&self) -> Result<(), L1Error> {
        if self.question.trim().is_empty() {
            return Err(L1Error::InvalidRecord("empty question".into()));
        }
        if self.gold_answer.trim().is_empty() {
            return Err(L1Error::InvalidRecord("empty gold answer".into()));
        }
        if let Some(w) = &self.wrong_answer {
            if normalize_whitespace(w) == normalize_whitespace(&self.gold_answer) {
                return Err(L1Error::InvalidRecord(format!("wrong answer equals gold `{w}`")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPosition {
    Random,
    /// 1-based slot.
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectedSource {
    Provided,
    AnswerSwap,
    ExternalClient,
    /// The record's own wrong answer when present, otherwise an answer swap.
    #[default]
    ProvidedThenSwap,
}

pub const DEFAULT_L1_TEMPLATE: &str = "In Image {k}, {question}";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct L1Config {
    pub num_distractors: usize,
    pub target_position: TargetPosition,
    pub rejected_source: RejectedSource,
    pub prompt_template: String,
}

impl Default for L1Config {
    fn default() -> Self {
        Self {
            num_distractors: 3,
            target_position: TargetPosition::Random,
            rejected_source: RejectedSource::default(),
            prompt_template: DEFAULT_L1_TEMPLATE.into(),
        }
    }
}

impl L1Config {
    pub fn validate(&self) -> Result<(), L1Error> {
        if !(1..MAX_IMAGES).contains(&self.num_distractors) {
            return Err(L1Error::Config(format!(
                "num_distractors {} outside 1..={}",
                self.num_distractors,
                MAX_IMAGES - 1
            )));
        }
        if let TargetPosition::Fixed(k) = self.target_position {
            if k == 0 || k > self.num_distractors + 1 {
                return Err(L1Error::Config(format!(
                    "fixed target position {k} outside 1..={}",
                    self.num_distractors + 1
                )));
            }
        }
        if !self.prompt_template.contains("{k}") || !self.prompt_template.contains("{question}") {
            return Err(L1Error::Config("prompt template needs {k} and {question} slots".into()));
        }
        Ok(())
    }
}

/// Supplies a wrong answer from an outside model.
pub trait AnswerClient {
    fn id(&self) -> &str;
    fn wrong_answer(&self, record: &VqaRecord, images: &[ImageRef], target_slot: usize) -> Result<String, String>;
}

/// Where distractors and swap donors come from.
#[derive(Clone, Copy, Default)]
pub struct L1Sources<'a> {
    pub distractors: &'a [ImageRef],
    pub donors: &'a [VqaRecord],
    pub client: Option<&'a dyn AnswerClient>,
}

#[derive(Debug, Error, PartialEq)]
pub enum L1Error {
    #[error("invalid L1 config: {0}")]
    Config(String),
    #[error("invalid VQA record: {0}")]
    InvalidRecord(String),
    #[error("distractor pool exhausted: need {need}, {have} eligible")]
    PoolExhausted { need: usize, have: usize },
    #[error("rejected source `provided` but the record has no wrong answer")]
    MissingWrongAnswer,
    #[error("no donor record with qtype {0:?} and a different gold answer")]
    NoDonor(Option<String>),
    #[error("external answer client is not configured")]
    NoClient,
    #[error("external answer client failed: {0}")]
    Client(String),
}

/// Fill the prompt template. The question's first letter is lower-cased when
/// it follows the template's lead-in, unless it starts an acronym.
pub fn render_prompt(template: &str, slot: usize, question: &str) -> String {
    let q = question.trim();
    let mut chars = q.chars();
    let q = match (chars.next(), chars.next()) {
        (Some(first), Some(second)) if first.is_uppercase() && !second.is_uppercase() && !template.starts_with("{question}") => {
            let mut s: String = first.to_lowercase().collect();
            s.push_str(&q[first.len_utf8()..]);
            s
        }
        _ => q.to_string(),
    };
    template.replace("{k}", &slot.to_string()).replace("{question}", &q)
}

pub fn make_l1_sample(
    record: &VqaRecord,
    sources: L1Sources<'_>,
    cfg: &L1Config,
    rng: &mut Rng,
) -> Result<PreferenceSample, L1Error> {
    cfg.validate()?;
    record.validate()?;
    let target_concept = record.image.concept.as_ref();
    let eligible: Vec<&ImageRef> = sources
        .distractors
        .iter()
        .filter(|d| d.path != record.image.path)
        .filter(|d| match (target_concept, d.concept.as_ref()) {
            (Some(t), Some(c)) => t != c,
            _ => true,
        })
        .collect();
    if eligible.len() < cfg.num_distractors {
        return Err(L1Error::PoolExhausted {
            need: cfg.num_distractors,
            have: eligible.len(),
        });
    }
    let mut images: Vec<ImageRef> = rng
        .sample_indices(eligible.len(), cfg.num_distractors)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect();
    let slot = match cfg.target_position {
        TargetPosition::Random => rng.index(cfg.num_distractors + 1),
        TargetPosition::Fixed(k) => k - 1,
    };
    images.insert(slot, record.image.clone());

    let (rejected, mode) = match cfg.rejected_source {
        RejectedSource::Provided => (
            record.wrong_answer.clone().ok_or(L1Error::MissingWrongAnswer)?,
            "provided",
        ),
        RejectedSource::AnswerSwap => (answer_swap(record, sources.donors, rng)?, "answer_swap"),
        RejectedSource::ProvidedThenSwap => match &record.wrong_answer {
            Some(w) => (w.clone(), "provided"),
            None => (answer_swap(record, sources.donors, rng)?, "answer_swap"),
        },
        RejectedSource::ExternalClient => {
            let client = sources.client.ok_or(L1Error::NoClient)?;
            let answer = client.wrong_answer(record, &images, slot).map_err(L1Error::Client)?;
            if normalize_whitespace(&answer) == normalize_whitespace(&record.gold_answer) {
                return Err(L1Error::Client(format!("client `{}` returned the gold answer", client.id())));
            }
            (answer, "external_client")
        }
    };

    let mut meta = BTreeMap::new();
    meta.insert("target_index".into(), (slot + 1).to_string());
    meta.insert("rejected_source".into(), mode.into());
    meta.insert("seed".into(), rng.seed().to_string());
    if let Some(q) = &record.qtype {
        meta.insert("qtype".into(), q.clone());
    }
    if let Some(c) = target_concept {
        meta.insert("concept".into(), c.to_string());
    }
    Ok(PreferenceSample {
        id: format!("l1-{:016x}", rng.seed()),
        level: Level::L1,
        images,
        prompt: render_prompt(&cfg.prompt_template, slot + 1, &record.question),
        chosen: record.gold_answer.clone(),
        rejected,
        meta,
    })
}

/// A gold answer borrowed from another record of the same question type.
pub fn answer_swap(record: &VqaRecord, donors: &[VqaRecord], rng: &mut Rng) -> Result<String, L1Error> {
    let gold = normalize_whitespace(&record.gold_answer);
    let candidates: Vec<&VqaRecord> = donors
        .iter()
        .filter(|d| d.qtype == record.qtype && normalize_whitespace(&d.gold_answer) != gold)
        .collect();
    rng.choose(&candidates)
        .map(|d| d.gold_answer.clone())
        .ok_or_else(|| L1Error::NoDonor(record.qtype.clone()))
}
