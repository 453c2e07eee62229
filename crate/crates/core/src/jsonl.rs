//! JSONL persistence for preference samples.
//!
//! One object per line with keys in the fixed order `id, level, images,
//! prompt, chosen, rejected, meta`. `meta` is a sorted map, so identical
//! datasets serialize to identical bytes.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::types::{PreferenceSample, ValidationError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Invalid(#[from] ValidationError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    InvalidAt {
        line: usize,
        #[source]
        source: ValidationError,
    },
    #[error("serialization of `{id}` failed: {message}")]
    Serialize { id: String, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Validate and write samples; returns the number of lines written.
pub fn write_jsonl<W: Write>(samples: &[PreferenceSample], mut sink: W) -> Result<usize, DatasetError> {
    for s in samples {
        s.validate()?;
        let line = serde_json::to_string(s).map_err(|e| DatasetError::Serialize {
            id: s.id.clone(),
            message: e.to_string(),
        })?;
        sink.write_all(line.as_bytes())?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(samples.len())
}

/// Read and validate samples. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(source: R) -> Result<Vec<PreferenceSample>, DatasetError> {
    let records: Vec<(usize, PreferenceSample)> = read_records(source)?;
    records
        .into_iter()
        .map(|(line, s)| {
            s.validate()
                .map_err(|source| DatasetError::InvalidAt { line, source })?;
            Ok(s)
        })
        .collect()
}

/// Generic JSONL reader used for input manifests; yields `(line number, record)`.
pub fn read_records<T: DeserializeOwned, R: BufRead>(source: R) -> Result<Vec<(usize, T)>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    Ok(out)
}

pub fn write_records<T: Serialize, W: Write>(records: &[T], mut sink: W) -> Result<usize, DatasetError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| DatasetError::Serialize {
            id: String::new(),
            message: e.to_string(),
        })?;
        sink.write_all(line.as_bytes())?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::types::{ConceptLabel, ImageRef, Level};

    fn l1_sample() -> PreferenceSample {
        let mut meta = BTreeMap::new();
        meta.insert("target_index".into(), "2".into());
        PreferenceSample {
            id: "l1-0001".into(),
            level: Level::L1,
            images: vec![
                ImageRef::new("images/d0.png"),
                ImageRef::new("images/t.png").with_concept(ConceptLabel::new("car").unwrap()),
            ],
            prompt: "In Image 2, what is the color of the car?".into(),
            chosen: "white".into(),
            rejected: "red".into(),
            meta,
        }
    }

    #[test]
    fn empty_sequence_writes_nothing() {
        let mut buf = Vec::new();
        assert_eq!(write_jsonl(&[], &mut buf).unwrap(), 0);
        assert!(buf.is_empty());
    }

    #[test]
    fn single_sample_round_trips_with_fixed_key_order() {
        let s = l1_sample();
        let mut buf = Vec::new();
        assert_eq!(write_jsonl(std::slice::from_ref(&s), &mut buf).unwrap(), 1);
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        let keys = ["\"id\"", "\"level\"", "\"images\"", "\"prompt\"", "\"chosen\"", "\"rejected\"", "\"meta\""];
        let offsets: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(offsets.windows(2).all(|w| w[0] < w[1]), "{text}");
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        let b = &back[0];
        assert_eq!(b.id, s.id);
        assert_eq!(b.level, s.level);
        assert_eq!(b.images, s.images);
        assert_eq!(b.prompt, s.prompt);
        assert_eq!(b.chosen, s.chosen);
        assert_eq!(b.rejected, s.rejected);
        assert_eq!(b.meta, s.meta);
    }

    #[test]
    fn seven_images_is_rejected_by_id() {
        let mut s = l1_sample();
        s.id = "too-many".into();
        s.images = (0..7).map(|i| ImageRef::new(format!("images/{i}.png"))).collect();
        let err = write_jsonl(&[s], Vec::new()).unwrap_err();
        assert!(err.to_string().contains("too-many"), "{err}");
    }

    #[test]
    fn identical_chosen_and_rejected_fails_at_its_line() {
        let ok = serde_json::to_string(&l1_sample()).unwrap();
        let mut bad = l1_sample();
        bad.rejected = bad.chosen.clone();
        let bad = serde_json::to_string(&bad).unwrap();
        let input = format!("{ok}\n{bad}\n");
        match read_jsonl(input.as_bytes()).unwrap_err() {
            DatasetError::InvalidAt { line, source } => {
                assert_eq!(line, 2);
                assert_eq!(source.field, "rejected");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn blank_trailing_lines_are_ignored() {
        let ok = serde_json::to_string(&l1_sample()).unwrap();
        let input = format!("{ok}\n\n   \n");
        assert_eq!(read_jsonl(input.as_bytes()).unwrap().len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let ok = serde_json::to_string(&l1_sample()).unwrap();
        let input = format!("{ok}\n{{not json\n");
        match read_jsonl(input.as_bytes()).unwrap_err() {
            DatasetError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    fn arb_sample() -> impl Strategy<Value = PreferenceSample> {
        let level = prop_oneof![
            Just(Level::L1),
            Just(Level::L2Kin),
            Just(Level::L2Arith),
            Just(Level::L3)
        ];
        (
            "[a-z0-9-]{1,12}",
            level,
            proptest::collection::vec(("[a-z]{1,8}", proptest::option::of("[a-z]{1,6}( [a-z]{1,6})?")), 1..=6),
            "[ -~]{1,40}",
            "[ -~]{0,30}",
            proptest::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,10}", 0..4),
        )
            .prop_map(|(id, level, imgs, prompt, chosen, meta)| {
                let images: Vec<ImageRef> = imgs
                    .into_iter()
                    .map(|(p, c)| ImageRef {
                        path: format!("images/{p}.png"),
                        concept: c.map(|c| ConceptLabel::new(&c).unwrap()),
                        ledger: None,
                    })
                    .collect();
                let prompt = format!("{} Image {}", prompt.replace("Image", "img"), images.len());
                PreferenceSample {
                    id,
                    level,
                    images,
                    prompt,
                    rejected: format!("not {chosen}"),
                    chosen: format!("ok {chosen}"),
                    meta,
                }
            })
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(samples in proptest::collection::vec(arb_sample(), 0..8)) {
            let mut buf = Vec::new();
            let n = write_jsonl(&samples, &mut buf).unwrap();
            prop_assert_eq!(n, samples.len());
            let back = read_jsonl(buf.as_slice()).unwrap();
            prop_assert_eq!(back, samples);
        }
    }
}
