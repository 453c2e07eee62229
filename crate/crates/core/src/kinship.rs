//! Kinship yes/no pairs built from a labelled person manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::Rng;
use crate::scene::{encode_png, L2Config, SceneError};
use crate::types::{ImageRef, Level, PreferenceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    ParentOf,
    ChildOf,
    SiblingOf,
    SpouseOf,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::ParentOf, Relation::ChildOf, Relation::SiblingOf, Relation::SpouseOf];

    pub fn inverse(self) -> Relation {
        match self {
            Relation::ParentOf => Relation::ChildOf,
            Relation::ChildOf => Relation::ParentOf,
            r => r,
        }
    }

    pub fn noun(self) -> &'static str {
        match self {
            Relation::ParentOf => "parent",
            Relation::ChildOf => "child",
            Relation::SiblingOf => "sibling",
            Relation::SpouseOf => "spouse",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::ParentOf => "parent_of",
            Relation::ChildOf => "child_of",
            Relation::SiblingOf => "sibling_of",
            Relation::SpouseOf => "spouse_of",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub other_person_id: String,
    pub relation: Relation,
}

/// One line of the kinship manifest: `person_id` is `relation` of each
/// `other_person_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinManifestEntry {
    pub person_id: String,
    pub family_id: String,
    pub image: ImageRef,
    #[serde(default)]
    pub relations: Vec<RelationEdge>,
}

#[derive(Debug, Error, PartialEq)]
pub enum KinshipError {
    #[error("duplicate person id `{0}`")]
    DuplicatePerson(String),
    #[error("`{person}` relates to unknown person `{other}`")]
    UnknownPerson { person: String, other: String },
    #[error("`{0}` is related to itself")]
    SelfRelation(String),
    #[error("inconsistent manifest: `{a}` -> `{b}` is both {first} and {second}")]
    Inconsistent {
        a: String,
        b: String,
        first: Relation,
        second: Relation,
    },
    #[error("manifest has {have} people, need at least {need}")]
    TooFewPeople { have: usize, need: usize },
    #[error("relation truth is undefined for `{subject}` / `{object}` ({relation})")]
    Undefined {
        subject: String,
        object: String,
        relation: Relation,
    },
    #[error("no query with a defined truth value found after {0} draws")]
    NoDefinedQuery(usize),
    #[error(transparent)]
    Config(#[from] SceneError),
}

/// The manifest with its relations closed under inversion.
#[derive(Debug, Clone)]
pub struct KinshipGraph {
    people: Vec<KinManifestEntry>,
    facts: BTreeMap<(usize, usize), Relation>,
}

impl KinshipGraph {
    pub fn build(entries: Vec<KinManifestEntry>) -> Result<Self, KinshipError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.person_id.clone(), i).is_some() {
                return Err(KinshipError::DuplicatePerson(e.person_id.clone()));
            }
        }
        let mut facts: BTreeMap<(usize, usize), Relation> = BTreeMap::new();
        for (a, e) in entries.iter().enumerate() {
            for edge in &e.relations {
                let b = *index.get(&edge.other_person_id).ok_or_else(|| KinshipError::UnknownPerson {
                    person: e.person_id.clone(),
                    other: edge.other_person_id.clone(),
                })?;
                if a == b {
                    return Err(KinshipError::SelfRelation(e.person_id.clone()));
                }
                for (x, y, rel) in [(a, b, edge.relation), (b, a, edge.relation.inverse())] {
                    if let Some(&prev) = facts.get(&(x, y)) {
                        if prev != rel {
                            return Err(KinshipError::Inconsistent {
                                a: entries[x].person_id.clone(),
                                b: entries[y].person_id.clone(),
                                first: prev,
                                second: rel,
                            });
                        }
                    }
                    facts.insert((x, y), rel);
                }
            }
        }
        Ok(Self { people: entries, facts })
    }

    pub fn len(&self) -> usize {
        self.people.len()
    }

    pub fn is_empty(&self) -> bool {
        self.people.is_empty()
    }

    pub fn person(&self, i: usize) -> &KinManifestEntry {
        &self.people[i]
    }

    pub fn relation(&self, a: usize, b: usize) -> Option<Relation> {
        self.facts.get(&(a, b)).copied()
    }

    /// `Some(true)` when the closure states the relation, `Some(false)` when
    /// the two people have a different known relation or belong to different
    /// families, `None` when nothing is known.
    pub fn truth(&self, a: usize, b: usize, relation: Relation) -> Option<bool> {
        match self.relation(a, b) {
            Some(r) => Some(r == relation),
            None if self.people[a].family_id != self.people[b].family_id => Some(false),
            None => None,
        }
    }

    fn true_facts(&self) -> Vec<(usize, usize, Relation)> {
        self.facts.iter().map(|(&(a, b), &r)| (a, b, r)).collect()
    }
}

/// A fully specified kinship question: which people appear in which image
/// slot, and which two slots the question relates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KinshipQuery {
    /// Graph indices in image order.
    pub people: Vec<usize>,
    /// 0-based image slots.
    pub subject: usize,
    pub object: usize,
    pub relation: Relation,
}

pub fn kinship_question(subject: usize, object: usize, relation: Relation) -> String {
    format!(
        "Is the person in Image {} the {} of the person in Image {}?",
        subject + 1,
        relation.noun(),
        object + 1
    )
}

/// The deterministic answer caption for `truth`.
pub fn kinship_caption(subject: usize, object: usize, relation: Relation, truth: bool) -> String {
    if truth {
        format!("Yes, Image {} is the {} of Image {}.", subject + 1, relation.noun(), object + 1)
    } else {
        format!("No, Image {} is not the {} of Image {}.", subject + 1, relation.noun(), object + 1)
    }
}

pub fn build_kinship_sample(graph: &KinshipGraph, query: &KinshipQuery, id: String) -> Result<PreferenceSample, KinshipError> {
    let a = query.people[query.subject];
    let b = query.people[query.object];
    let truth = graph.truth(a, b, query.relation).ok_or_else(|| KinshipError::Undefined {
        subject: graph.person(a).person_id.clone(),
        object: graph.person(b).person_id.clone(),
        relation: query.relation,
    })?;
    let mut meta = BTreeMap::new();
    meta.insert("subject".into(), (query.subject + 1).to_string());
    meta.insert("object".into(), (query.object + 1).to_string());
    meta.insert("relation".into(), query.relation.to_string());
    meta.insert("truth".into(), truth.to_string());
    Ok(PreferenceSample {
        id,
        level: Level::L2Kin,
        images: query.people.iter().map(|&p| graph.person(p).image.clone()).collect(),
        prompt: kinship_question(query.subject, query.object, query.relation),
        chosen: kinship_caption(query.subject, query.object, query.relation, truth),
        rejected: kinship_caption(query.subject, query.object, query.relation, !truth),
        meta,
    })
}

const MAX_QUERY_DRAWS: usize = 256;

/// Draw a query with a defined truth value (half the time a stated fact) and
/// build its sample.
pub fn make_kinship_sample(graph: &KinshipGraph, cfg: &L2Config, rng: &mut Rng) -> Result<PreferenceSample, KinshipError> {
    cfg.validate()?;
    let n = cfg.num_images;
    if graph.len() < n {
        return Err(KinshipError::TooFewPeople { have: graph.len(), need: n });
    }
    let facts = graph.true_facts();
    let id = format!("l2k-{:016x}", rng.seed());
    for _ in 0..MAX_QUERY_DRAWS {
        let (a, b, relation) = if !facts.is_empty() && rng.chance(0.5) {
            facts[rng.index(facts.len())]
        } else {
            let pair = rng.sample_indices(graph.len(), 2);
            (pair[0], pair[1], Relation::ALL[rng.index(Relation::ALL.len())])
        };
        if graph.truth(a, b, relation).is_none() {
            continue;
        }
        let others: Vec<usize> = (0..graph.len()).filter(|&p| p != a && p != b).collect();
        let mut people = vec![a, b];
        people.extend(rng.sample_indices(others.len(), n - 2).into_iter().map(|i| others[i]));
        rng.shuffle(&mut people);
        let subject = people.iter().position(|&p| p == a).expect("subject placed");
        let object = people.iter().position(|&p| p == b).expect("object placed");
        let mut sample = build_kinship_sample(graph, &KinshipQuery { people, subject, object, relation }, id)?;
        sample.meta.insert("seed".into(), rng.seed().to_string());
        return Ok(sample);
    }
    Err(KinshipError::NoDefinedQuery(MAX_QUERY_DRAWS))
}

// 5x7 bitmap glyphs, one byte per row, low five bits used (bit 4 = left).
const FONT: [(char, [u8; 7]); 26] = [
    ('A', [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('B', [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E]),
    ('C', [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E]),
    ('D', [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E]),
    ('E', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F]),
    ('F', [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10]),
    ('G', [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F]),
    ('H', [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11]),
    ('I', [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('J', [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C]),
    ('K', [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11]),
    ('L', [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F]),
    ('M', [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11]),
    ('N', [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11]),
    ('O', [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E]),
    ('P', [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10]),
    ('Q', [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D]),
    ('R', [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11]),
    ('S', [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E]),
    ('T', [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04]),
    ('U', [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E]),
    ('V', [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04]),
    ('W', [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A]),
    ('X', [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11]),
    ('Y', [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04]),
    ('Z', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F]),
];

/// Placeholder portrait: a tile coloured from the id's hash with the id's
/// initial letter drawn in white.
pub fn avatar_tile(person_id: &str, side: u32) -> Result<Vec<u8>, SceneError> {
    let digest = Sha256::digest(person_id.as_bytes());
    let bg = Rgb([64 + digest[0] / 2, 64 + digest[1] / 2, 64 + digest[2] / 2]);
    let mut img = RgbImage::from_pixel(side, side, bg);
    let initial = person_id
        .chars()
        .find(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_uppercase());
    if let Some((_, rows)) = initial.and_then(|c| FONT.iter().find(|(g, _)| *g == c)) {
        let cell = (side / 10).max(1);
        let x0 = (side - 5 * cell) / 2;
        let y0 = (side - 7 * cell) / 2;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..5u32 {
                if bits & (0x10 >> col) == 0 {
                    continue;
                }
                for dy in 0..cell {
                    for dx in 0..cell {
                        img.put_pixel(x0 + col * cell + dx, y0 + r as u32 * cell + dy, Rgb([255, 255, 255]));
                    }
                }
            }
        }
    }
    encode_png(&img)
}
