//! Visual-arithmetic samples: count one object kind across several scenes and
//! combine the counts with `+` or `-`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::scene::{synth_scene, L2Config, ObjectKind, SceneError, SceneLedger};
use crate::types::{GeneratedSample, ImageAsset, ImageRef, Level, PreferenceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArithOp {
    Add,
    Subtract,
}

impl fmt::Display for ArithOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArithOp::Add => "add",
            ArithOp::Subtract => "subtract",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArithQuestion {
    /// 1-based image indices in fold order; the first is the minuend for
    /// subtraction.
    pub image_indices: Vec<usize>,
    pub object_kind: ObjectKind,
    pub operator: ArithOp,
    pub answer: i64,
}

impl ArithQuestion {
    /// Left fold of the ledger counts in `image_indices` order.
    pub fn evaluate(indices: &[usize], kind: ObjectKind, op: ArithOp, ledgers: &[SceneLedger]) -> i64 {
        let mut counts = indices.iter().map(|&i| i64::from(ledgers[i - 1].count_of(kind)));
        let first = counts.next().unwrap_or(0);
        counts.fold(first, |acc, c| match op {
            ArithOp::Add => acc + c,
            ArithOp::Subtract => acc - c,
        })
    }

    pub fn prompt(&self) -> String {
        let what = self.object_kind.plural();
        let names: Vec<String> = self.image_indices.iter().map(|i| format!("Image {i}")).collect();
        match self.operator {
            ArithOp::Add => format!("How many {what} are in {} combined?", join_list(&names)),
            ArithOp::Subtract if names.len() == 2 => format!(
                "Subtract the number of {what} in {} from those in {}. What is the result?",
                names[1], names[0]
            ),
            ArithOp::Subtract => format!(
                "Take the number of {what} in {}, then subtract those in {}. What is the result?",
                names[0],
                join_list(&names[1..])
            ),
        }
    }

    pub fn answer_text(&self, value: i64) -> String {
        match self.operator {
            ArithOp::Add => format!("There are {value} {} in total.", self.object_kind.plural()),
            ArithOp::Subtract => format!("The result is {value}."),
        }
    }
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

/// A near-miss wrong answer: `correct ± d`, `d` in 1..=3, sign drawn
/// uniformly. Sums never go below zero, so a negative draw flips to `+d`.
pub fn near_miss(correct: i64, op: ArithOp, rng: &mut Rng) -> i64 {
    let d = i64::from(rng.range_inclusive(1, 3));
    let down = rng.chance(0.5);
    if down && (op == ArithOp::Subtract || correct - d >= 0) {
        correct - d
    } else {
        correct + d
    }
}

pub fn make_arith_sample(cfg: &L2Config, rng: &mut Rng) -> Result<GeneratedSample, SceneError> {
    cfg.validate()?;
    let id = format!("l2a-{:016x}", rng.seed());
    let mut ledgers = Vec::with_capacity(cfg.num_images);
    let mut assets = Vec::with_capacity(cfg.num_images);
    for i in 0..cfg.num_images {
        let (png, ledger) = synth_scene(cfg, rng)?;
        assets.push(ImageAsset {
            path: format!("images/{id}-{}.png", i + 1),
            png,
        });
        ledgers.push(ledger);
    }

    let q = rng.range_inclusive(cfg.num_question_images.0 as u32, cfg.num_question_images.1 as u32) as usize;
    let operator = if rng.chance(0.5) { ArithOp::Add } else { ArithOp::Subtract };
    let mut indices: Vec<usize> = rng.sample_indices(cfg.num_images, q).into_iter().map(|i| i + 1).collect();
    if operator == ArithOp::Add {
        indices.sort_unstable();
    }
    let present: BTreeSet<ObjectKind> = indices.iter().flat_map(|&i| ledgers[i - 1].kinds()).collect();
    let present: Vec<ObjectKind> = present.into_iter().collect();
    let object_kind = match rng.choose(&present) {
        Some(k) => *k,
        None => ObjectKind::SHAPES[rng.index(ObjectKind::SHAPES.len())],
    };
    let answer = ArithQuestion::evaluate(&indices, object_kind, operator, &ledgers);
    let question = ArithQuestion {
        image_indices: indices,
        object_kind,
        operator,
        answer,
    };
    let wrong = near_miss(answer, operator, rng);

    let mut meta = BTreeMap::new();
    meta.insert("answer".into(), answer.to_string());
    meta.insert("image_indices".into(), join_indices(&question.image_indices));
    meta.insert("object_kind".into(), object_kind.name());
    meta.insert("operator".into(), operator.to_string());
    meta.insert("rejected_answer".into(), wrong.to_string());
    meta.insert("seed".into(), rng.seed().to_string());

    let images = assets
        .iter()
        .zip(ledgers)
        .map(|(a, ledger)| ImageRef {
            path: a.path.clone(),
            concept: None,
            ledger: Some(ledger),
        })
        .collect();
    let sample = PreferenceSample {
        id,
        level: Level::L2Arith,
        images,
        prompt: question.prompt(),
        chosen: question.answer_text(answer),
        rejected: question.answer_text(wrong),
        meta,
    };
    Ok(GeneratedSample { sample, assets })
}

pub fn join_indices(indices: &[usize]) -> String {
    indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

/// Parse the `image_indices` / `object_kind` / `operator` meta of an
/// arithmetic sample back into a question.
pub fn question_from_meta(meta: &BTreeMap<String, String>) -> Option<ArithQuestion> {
    let image_indices = meta
        .get("image_indices")?
        .split(',')
        .map(|s| s.trim().parse().ok())
        .collect::<Option<Vec<usize>>>()?;
    let object_kind = parse_kind(meta.get("object_kind")?)?;
    let operator = match meta.get("operator")?.as_str() {
        "add" => ArithOp::Add,
        "subtract" => ArithOp::Subtract,
        _ => return None,
    };
    let answer = meta.get("answer")?.parse().ok()?;
    Some(ArithQuestion {
        image_indices,
        object_kind,
        operator,
        answer,
    })
}

pub fn parse_kind(name: &str) -> Option<ObjectKind> {
    match name {
        "circle" => Some(ObjectKind::Circle),
        "square" => Some(ObjectKind::Square),
        "triangle" => Some(ObjectKind::Triangle),
        "star" => Some(ObjectKind::Star),
        other => {
            let d: u8 = other.strip_prefix("digit-")?.parse().ok()?;
            (d <= 9).then_some(ObjectKind::Digit(d))
        }
    }
}
