//! Shared domain types and the preference-sample invariants.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::SceneLedger;

/// Upper bound on images in one sample context.
pub const MAX_IMAGES: usize = 6;

/// Dataset level a sample was generated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    #[serde(rename = "L1")]
    L1,
    #[serde(rename = "L2_KIN")]
    L2Kin,
    #[serde(rename = "L2_ARITH")]
    L2Arith,
    #[serde(rename = "L3")]
    L3,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::L1, Level::L2Kin, Level::L2Arith, Level::L3];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::L1 => "L1",
            Level::L2Kin => "L2_KIN",
            Level::L2Arith => "L2_ARITH",
            Level::L3 => "L3",
        }
    }

    /// Directory / CLI slug, e.g. `l2-arith`.
    pub fn slug(self) -> &'static str {
        match self {
            Level::L1 => "l1",
            Level::L2Kin => "l2-kin",
            Level::L2Arith => "l2-arith",
            Level::L3 => "l3",
        }
    }

    pub fn task_level(self) -> TaskLevel {
        match self {
            Level::L1 => TaskLevel::L1,
            Level::L2Kin | Level::L2Arith => TaskLevel::L2,
            Level::L3 => TaskLevel::L3,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Level::ALL
            .into_iter()
            .find(|l| l.slug() == norm)
            .ok_or_else(|| format!("unknown level `{s}` (expected l1, l2-kin, l2-arith, l3)"))
    }
}

/// Coarse reasoning level used by training schedules; L2 covers both
/// kinship and arithmetic samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskLevel {
    L1,
    L2,
    L3,
}

impl TaskLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskLevel::L1 => "L1",
            TaskLevel::L2 => "L2",
            TaskLevel::L3 => "L3",
        }
    }

    pub fn members(self) -> &'static [Level] {
        match self {
            TaskLevel::L1 => &[Level::L1],
            TaskLevel::L2 => &[Level::L2Kin, Level::L2Arith],
            TaskLevel::L3 => &[Level::L3],
        }
    }
}

impl fmt::Display for TaskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Canonical lowercase concept name, e.g. `peacock` or `tiger cat`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConceptLabel(String);

impl ConceptLabel {
    pub fn new(name: &str) -> Result<Self, String> {
        let canonical = name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if canonical.is_empty() {
            return Err("concept label is empty".into());
        }
        Ok(Self(canonical))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ConceptLabel {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        ConceptLabel::new(&value)
    }
}

impl From<ConceptLabel> for String {
    fn from(c: ConceptLabel) -> Self {
        c.0
    }
}

impl fmt::Display for ConceptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    /// POSIX-style path relative to the dataset directory.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concept: Option<ConceptLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<SceneLedger>,
}

impl ImageRef {
    pub fn new(path: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            concept: None,
            ledger: None,
        }
    }

    pub fn with_concept(mut self, concept: ConceptLabel) -> Self {
        self.concept = Some(concept);
        self
    }
}

/// One `(x, y_w, y_l)` preference record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSample {
    pub id: String,
    pub level: Level,
    pub images: Vec<ImageRef>,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// Image bytes a generator produced, to be written at `path` relative to the
/// dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageAsset {
    pub path: String,
    pub png: Vec<u8>,
}

/// A sample plus any images synthesized for it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub sample: PreferenceSample,
    pub assets: Vec<ImageAsset>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("sample `{id}`: invalid {field}: {message}")]
pub struct ValidationError {
    pub id: String,
    pub field: &'static str,
    pub message: String,
}

fn image_mention() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\bImage (\d+)\b").expect("static regex"))
}

/// 1-based image indices mentioned as `Image k` in `text`.
pub fn referenced_images(text: &str) -> Vec<usize> {
    image_mention()
        .captures_iter(text)
        .filter_map(|c| c[1].parse().ok())
        .collect()
}

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl PreferenceSample {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let fail = |field, message: String| ValidationError {
            id: self.id.clone(),
            field,
            message,
        };
        if self.id.trim().is_empty() {
            return Err(fail("id", "empty".into()));
        }
        if self.images.is_empty() || self.images.len() > MAX_IMAGES {
            return Err(fail(
                "images",
                format!("{} images, expected 1..={MAX_IMAGES}", self.images.len()),
            ));
        }
        if let Some(pos) = self.images.iter().position(|im| im.path.trim().is_empty()) {
            return Err(fail("images", format!("image {} has an empty path", pos + 1)));
        }
        if self.prompt.trim().is_empty() {
            return Err(fail("prompt", "empty".into()));
        }
        if normalize_whitespace(&self.chosen) == normalize_whitespace(&self.rejected) {
            return Err(fail("rejected", "identical to chosen".into()));
        }
        for k in referenced_images(&self.prompt) {
            if k == 0 || k > self.images.len() {
                return Err(fail(
                    "prompt",
                    format!("mentions Image {k} but the sample has {} images", self.images.len()),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> PreferenceSample {
        PreferenceSample {
            id: "s1".into(),
            level: Level::L1,
            images: vec![ImageRef::new("images/a.png"), ImageRef::new("images/b.png")],
            prompt: "In Image 2, what color is the car?".into(),
            chosen: "white".into(),
            rejected: "red".into(),
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn valid_sample_passes() {
        sample().validate().unwrap();
    }

    #[test]
    fn whitespace_only_difference_is_not_a_contrast() {
        let mut s = sample();
        s.chosen = "a  white\tcar".into();
        s.rejected = " a white car ".into();
        assert_eq!(s.validate().unwrap_err().field, "rejected");
    }

    #[test]
    fn prompt_cannot_mention_missing_image() {
        let mut s = sample();
        s.prompt = "Compare Image 1 and Image 3.".into();
        let err = s.validate().unwrap_err();
        assert_eq!(err.field, "prompt");
        s.prompt = "Look at Image 0.".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn image_cap_is_enforced() {
        let mut s = sample();
        s.images = (0..7).map(|i| ImageRef::new(format!("images/{i}.png"))).collect();
        assert_eq!(s.validate().unwrap_err().field, "images");
        s.images.clear();
        assert_eq!(s.validate().unwrap_err().field, "images");
    }

    #[test]
    fn concept_labels_are_canonical() {
        assert_eq!(ConceptLabel::new("  Tiger   Cat ").unwrap().as_str(), "tiger cat");
        assert!(ConceptLabel::new("   ").is_err());
    }

    #[test]
    fn level_parsing_and_slugs() {
        for l in Level::ALL {
            assert_eq!(l.slug().parse::<Level>().unwrap(), l);
        }
        assert_eq!("L2_ARITH".parse::<Level>().unwrap(), Level::L2Arith);
        assert!("l4".parse::<Level>().is_err());
        assert_eq!(Level::L2Kin.task_level(), TaskLevel::L2);
    }
}
