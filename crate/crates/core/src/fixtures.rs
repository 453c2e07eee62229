//! Constructed fixtures: feature-level toy tasks for the numerical core and
//! small synthetic input corpora for the generators.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use crate::eval::EvalItem;
use crate::jsonl::write_records;
use crate::kinship::{avatar_tile, KinManifestEntry, Relation, RelationEdge};
use crate::l1::VqaRecord;
use crate::l3::ConceptIndexEntry;
use crate::policy::{Choice, LogLinearPolicy, PreferenceExample};
use crate::rng::Rng;
use crate::scene::{render_png, LedgerEntry, ObjectKind, SceneError, SceneLedger, PALETTE, PALETTE_NAMES};
use crate::types::{ConceptLabel, ImageRef, Level, TaskLevel};

fn unit_vector(dims: std::ops::Range<usize>, total: usize, rng: &mut Rng) -> Vec<f64> {
    let mut v = vec![0.0; total];
    for i in dims.clone() {
        v[i] = rng.normal();
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn noise(dims: std::ops::Range<usize>, total: usize, sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let mut v = vec![0.0; total];
    for i in dims {
        v[i] = sigma * rng.normal();
    }
    v
}

/// Chosen leans along a hidden direction, rejected against it, alternates
/// are pure noise. A linear scorer separates every pair.
pub fn separable_set(n: usize, dim: usize, rng: &mut Rng) -> Vec<PreferenceExample> {
    let good = unit_vector(0..dim, dim, rng);
    (0..n)
        .map(|i| {
            let mut rows: Vec<Vec<f64>> = (0..4).map(|_| noise(0..dim, dim, 0.3, rng)).collect();
            // Make the pair separable by construction: push the chosen and
            // rejected apart along `good` past the noise projection.
            let proj = |r: &Vec<f64>| r.iter().zip(&good).map(|(a, b)| a * b).sum::<f64>();
            let gap = 1.0 + (proj(&rows[1]) - proj(&rows[0])).max(0.0);
            for (k, g) in good.iter().enumerate() {
                rows[0][k] += 0.5 * gap * g;
                rows[1][k] -= 0.5 * gap * g;
            }
            PreferenceExample {
                id: format!("sep-{i}"),
                level: Level::L1,
                choice: Choice::from_dense(&rows),
            }
        })
        .collect()
}

/// Shape of the curriculum fixture's feature space.
#[derive(Debug, Clone, Copy)]
pub struct CurriculumSpec {
    pub dim: usize,
    /// Options per item.
    pub options: usize,
    /// Strength of the L3 target signal relative to unit noise.
    pub l3_signal: f64,
    pub l1_signal: f64,
    /// Magnitude of the positional cue.
    pub cue: f64,
}

impl Default for CurriculumSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            options: 4,
            l3_signal: 1.0,
            l1_signal: 1.5,
            cue: 1.0,
        }
    }
}

pub struct CurriculumFixture {
    pub data: BTreeMap<TaskLevel, Vec<PreferenceExample>>,
    pub probes: Vec<EvalItem>,
    /// Candidate features for each probe, keyed by probe id.
    pub probe_choices: BTreeMap<String, Choice>,
}

impl CurriculumFixture {
    /// Probe accuracy of the argmax chooser.
    pub fn probe_accuracy(&self, policy: &LogLinearPolicy) -> f64 {
        crate::eval::score_mc(&self.probes, |it| policy.argmax(&self.probe_choices[&it.id]))
            .expect("fixture has probes")
            .accuracy()
    }
}

/// A task family where L3 items are solved by features in one subspace
/// that L1 items never use. L1 items are solved by a positional cue
/// dimension which, in L3 items, is uninformative noise.
pub fn curriculum_fixture(spec: CurriculumSpec, n_train: usize, n_probe: usize, rng: &mut Rng) -> CurriculumFixture {
    let d = spec.dim;
    let l3_space = 0..d * 3 / 8;
    let l1_space = d * 3 / 8..d - 1;
    let cue = d - 1;
    let u = unit_vector(l3_space.clone(), d, rng);
    let v = unit_vector(l1_space.clone(), d, rng);

    let l3_item = |rng: &mut Rng| -> Vec<Vec<f64>> {
        (0..spec.options)
            .map(|k| {
                let mut row = noise(l3_space.clone(), d, 1.0, rng);
                if k == 0 {
                    row.iter_mut().zip(&u).for_each(|(x, ui)| *x += spec.l3_signal * ui);
                }
                row[cue] = if rng.chance(0.5) { spec.cue } else { -spec.cue };
                row
            })
            .collect()
    };
    let l1_item = |rng: &mut Rng| -> Vec<Vec<f64>> {
        (0..spec.options)
            .map(|k| {
                let mut row = noise(l1_space.clone(), d, 1.0, rng);
                if k == 0 {
                    row.iter_mut().zip(&v).for_each(|(x, vi)| *x += spec.l1_signal * vi);
                    row[cue] = spec.cue;
                }
                row
            })
            .collect()
    };

    // Target first, then one drawn distractor as rejected, then the rest.
    let to_example = |rows: Vec<Vec<f64>>, id: String, level: Level, rng: &mut Rng| {
        let mut rows = rows;
        let j = 1 + rng.index(rows.len() - 1);
        rows.swap(1, j);
        PreferenceExample {
            id,
            level,
            choice: Choice::from_dense(&rows),
        }
    };
    let l1: Vec<PreferenceExample> = (0..n_train)
        .map(|i| {
            let rows = l1_item(rng);
            to_example(rows, format!("cur-l1-{i}"), Level::L1, rng)
        })
        .collect();
    let l3: Vec<PreferenceExample> = (0..n_train)
        .map(|i| {
            let rows = l3_item(rng);
            to_example(rows, format!("cur-l3-{i}"), Level::L3, rng)
        })
        .collect();

    let mut probes = Vec::with_capacity(n_probe);
    let mut probe_choices = BTreeMap::new();
    for i in 0..n_probe {
        let mut rows = l3_item(rng);
        let slot = rng.index(spec.options);
        let target = rows.remove(0);
        rows.insert(slot, target);
        let id = format!("cur-probe-{i}");
        probe_choices.insert(id.clone(), Choice::from_dense(&rows));
        probes.push(EvalItem {
            id,
            level: Some(Level::L3),
            images: Vec::new(),
            question: "Which option matches?".into(),
            options: (1..=spec.options).map(|k| format!("Image {k}")).collect(),
            answer_key: slot,
        });
    }
    CurriculumFixture {
        data: BTreeMap::from([(TaskLevel::L1, l1), (TaskLevel::L3, l3)]),
        probes,
        probe_choices,
    }
}

/// One prompt, `arms` one-hot responses, reward 1 on arm 0 only.
pub fn bandit(arms: usize) -> Choice {
    Choice {
        features: (0..arms).map(|k| vec![(k, 1.0)]).collect(),
    }
}

/// File names written by [`write_demo_inputs`], relative to its directory.
pub const DEMO_VQA: &str = "vqa.jsonl";
pub const DEMO_DISTRACTORS: &str = "distractors.jsonl";
pub const DEMO_KIN_MANIFEST: &str = "kin_manifest.jsonl";
pub const DEMO_CONCEPTS: &str = "concepts.jsonl";

const DEMO_CANVAS: (u32, u32) = (128, 128);

/// One flat-colour shape kind repeated `count` times in a row.
fn demo_shape_png(kind: ObjectKind, color: u8, count: u32) -> Result<Vec<u8>, SceneError> {
    let size = 10;
    let step = DEMO_CANVAS.0 / (count + 1);
    let ledger = SceneLedger {
        entries: vec![LedgerEntry {
            kind,
            color,
            count,
            positions: (1..=count).map(|i| (i * step, DEMO_CANVAS.1 / 2)).collect(),
            size,
        }],
    };
    render_png(DEMO_CANVAS, &ledger)
}

fn write_file(root: &Path, rel: &str, bytes: &[u8]) -> io::Result<()> {
    let path = root.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)
}

fn to_io(e: impl std::fmt::Display) -> io::Error {
    io::Error::other(e.to_string())
}

const KIN_NAMES: [&str; 12] = ["ada", "ben", "cal", "dee", "eve", "fox", "gus", "hal", "ivy", "jon", "kai", "lea"];

/// Three families of four: two spouses, each parent of two siblings.
pub fn kin_manifest() -> Vec<KinManifestEntry> {
    let edge = |other: &str, relation| RelationEdge {
        other_person_id: other.into(),
        relation,
    };
    let mut out = Vec::new();
    for (f, fam) in KIN_NAMES.chunks(4).enumerate() {
        let [p1, p2, c1, c2] = [fam[0], fam[1], fam[2], fam[3]];
        let mut push = |id: &str, relations: Vec<RelationEdge>| {
            out.push(KinManifestEntry {
                person_id: id.into(),
                family_id: format!("family-{}", f + 1),
                image: ImageRef::new(format!("faces/{id}.png")),
                relations,
            })
        };
        let parent_edges = vec![
            edge(c1, Relation::ParentOf),
            edge(c2, Relation::ParentOf),
        ];
        let mut e1 = parent_edges.clone();
        e1.push(edge(p2, Relation::SpouseOf));
        push(p1, e1);
        push(p2, parent_edges);
        push(c1, vec![edge(c2, Relation::SiblingOf)]);
        push(c2, vec![]);
    }
    out
}

pub const DEMO_CONCEPT_NAMES: [&str; 12] = [
    "peacock", "tiger cat", "canoe", "violin", "lemon", "zebra", "kite", "teapot", "goldfish", "castle", "pretzel", "umbrella",
];

/// Writes a small self-consistent input corpus: VQA records with a
/// distractor pool, a kinship manifest with placeholder portraits, and a
/// concept index. Image paths are relative to `dir`.
pub fn write_demo_inputs(dir: &Path, seed: u64) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut rng = Rng::new(seed).substream("demo-inputs", 0);

    let mut records = Vec::new();
    let mut pool = Vec::new();
    for i in 0..60u32 {
        let kind = ObjectKind::SHAPES[rng.index(4)];
        let color = rng.index(PALETTE.len()) as u8;
        let count = rng.range_inclusive(1, 4);
        let rel = format!("vqa/{i:03}.png");
        write_file(dir, &rel, &demo_shape_png(kind, color, count).map_err(to_io)?)?;
        let concept = ConceptLabel::new(&format!("{} {}", PALETTE_NAMES[usize::from(color)], kind.name())).map_err(to_io)?;
        let image = ImageRef::new(rel).with_concept(concept);
        let (question, gold, wrong, qtype) = match i % 3 {
            0 => {
                let other = (usize::from(color) + 1 + rng.index(PALETTE.len() - 1)) % PALETTE.len();
                (
                    format!("What is the color of the {}?", if count == 1 { kind.name() } else { kind.plural() }),
                    format!("They are {}.", PALETTE_NAMES[usize::from(color)]),
                    format!("They are {}.", PALETTE_NAMES[other]),
                    "color",
                )
            }
            1 => (
                format!("How many {} are there?", kind.plural()),
                format!("There are {count} of them."),
                format!("There are {} of them.", count + rng.range_inclusive(1, 2)),
                "count",
            ),
            _ => {
                let other = ObjectKind::SHAPES[(ObjectKind::SHAPES.iter().position(|k| *k == kind).unwrap() + 1 + rng.index(3)) % 4];
                ("What shape is drawn?".to_string(), format!("A {}.", kind.name()), format!("A {}.", other.name()), "shape")
            }
        };
        records.push(VqaRecord {
            image,
            question,
            gold_answer: gold,
            // Every other record leaves the wrong answer to an answer swap.
            wrong_answer: (i % 2 == 0).then_some(wrong),
            qtype: Some(qtype.into()),
        });
    }
    for i in 0..30u32 {
        let kind = ObjectKind::SHAPES[i as usize % 4];
        let color = (i as usize / 4 % PALETTE.len()) as u8;
        let rel = format!("pool/{i:03}.png");
        write_file(dir, &rel, &demo_shape_png(kind, color, 1 + i % 3).map_err(to_io)?)?;
        let concept = ConceptLabel::new(&format!("{} {}", PALETTE_NAMES[usize::from(color)], kind.name())).map_err(to_io)?;
        pool.push(ImageRef::new(rel).with_concept(concept));
    }
    write_records(&records, fs::File::create(dir.join(DEMO_VQA))?).map_err(to_io)?;
    write_records(&pool, fs::File::create(dir.join(DEMO_DISTRACTORS))?).map_err(to_io)?;

    let manifest = kin_manifest();
    for e in &manifest {
        write_file(dir, &e.image.path, &avatar_tile(&e.person_id, 96).map_err(to_io)?)?;
    }
    write_records(&manifest, fs::File::create(dir.join(DEMO_KIN_MANIFEST))?).map_err(to_io)?;

    let mut entries = Vec::new();
    for name in DEMO_CONCEPT_NAMES {
        for k in 0..3 {
            let rel = format!("concepts/{}/{k}.png", name.replace(' ', "_"));
            write_file(dir, &rel, &avatar_tile(&format!("{name} {k}"), 96).map_err(to_io)?)?;
            entries.push(ConceptIndexEntry {
                concept: ConceptLabel::new(name).map_err(to_io)?,
                path: rel,
            });
        }
    }
    write_records(&entries, fs::File::create(dir.join(DEMO_CONCEPTS))?).map_err(to_io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jsonl::read_records;
    use crate::kinship::KinshipGraph;
    use crate::l3::ConceptIndex;
    use std::io::BufReader;

    #[test]
    fn demo_inputs_load() {
        let dir = tempfile::tempdir().unwrap();
        write_demo_inputs(dir.path(), 7).unwrap();
        let recs: Vec<(usize, VqaRecord)> = read_records(BufReader::new(fs::File::open(dir.path().join(DEMO_VQA)).unwrap())).unwrap();
        assert_eq!(recs.len(), 60);
        for (_, r) in &recs {
            r.validate().unwrap();
            assert!(dir.path().join(&r.image.path).exists());
        }
        let graph = KinshipGraph::build(kin_manifest()).unwrap();
        assert_eq!(graph.len(), 12);
        let idx = ConceptIndex::read_jsonl(BufReader::new(fs::File::open(dir.path().join(DEMO_CONCEPTS)).unwrap())).unwrap();
        assert_eq!(idx.len(), 12);
    }

    #[test]
    fn separable_set_is_separable() {
        let data = separable_set(100, 8, &mut Rng::new(0));
        // Recover the direction from the first example: chosen minus rejected
        // along a least-effort check that some linear scorer wins everywhere.
        let mut w = vec![0.0; 8];
        for e in &data {
            let dense = |k: usize| {
                let mut v = vec![0.0; 8];
                for &(i, x) in &e.choice.features[k] {
                    v[i] = x;
                }
                v
            };
            let (c, r) = (dense(0), dense(1));
            w.iter_mut().zip(c.iter().zip(&r)).for_each(|(wi, (a, b))| *wi += a - b);
        }
        let p = LogLinearPolicy { weights: w };
        let wins = data.iter().filter(|e| {
            let lp = crate::policy::PolicyHandle::log_probs(&p, &e.choice).unwrap();
            lp[0] > lp[1]
        });
        assert_eq!(wins.count(), 100);
    }
}
