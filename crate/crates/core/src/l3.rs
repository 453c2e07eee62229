//! Global visual search pairs: one target among distractors from other
//! concepts, a targeted caption as chosen and an untargeted caption of the
//! whole set as rejected.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::EvalItem;
use crate::jsonl::{read_records, DatasetError};
use crate::rng::Rng;
use crate::types::{ConceptLabel, ImageRef, Level, PreferenceSample, MAX_IMAGES};

#[derive(Debug, Error)]
pub enum L3Error {
    #[error("invalid L3 config: {0}")]
    Config(String),
    #[error("concept index has {have} concepts, need {need}")]
    InsufficientConcepts { need: usize, have: usize },
    #[error("image `{path}` listed under both `{first}` and `{second}`")]
    DuplicateImage { path: String, first: String, second: String },
    #[error("concept index: {0}")]
    Index(#[from] DatasetError),
    #[error("caption provider: {0}")]
    Provider(#[from] ProviderError),
    #[error("primary object `{object}` is also the concept of distractor Image {slot}")]
    Collision { object: String, slot: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptIndexEntry {
    pub concept: ConceptLabel,
    pub path: String,
}

/// Images grouped by concept. Each image belongs to exactly one concept.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConceptIndex {
    concepts: BTreeMap<ConceptLabel, Vec<ImageRef>>,
}

impl ConceptIndex {
    pub fn from_entries(entries: impl IntoIterator<Item = ConceptIndexEntry>) -> Result<Self, L3Error> {
        let mut owner: BTreeMap<String, ConceptLabel> = BTreeMap::new();
        let mut concepts: BTreeMap<ConceptLabel, Vec<ImageRef>> = BTreeMap::new();
        for e in entries {
            match owner.get(&e.path) {
                Some(c) if *c == e.concept => continue,
                Some(c) => {
                    return Err(L3Error::DuplicateImage {
                        path: e.path,
                        first: c.to_string(),
                        second: e.concept.to_string(),
                    })
                }
                None => {}
            }
            owner.insert(e.path.clone(), e.concept.clone());
            concepts
                .entry(e.concept.clone())
                .or_default()
                .push(ImageRef::new(e.path).with_concept(e.concept));
        }
        Ok(Self { concepts })
    }

    pub fn read_jsonl<R: BufRead>(source: R) -> Result<Self, L3Error> {
        let records = read_records::<ConceptIndexEntry, _>(source)?;
        Self::from_entries(records.into_iter().map(|(_, e)| e))
    }

    pub fn entries(&self) -> Vec<ConceptIndexEntry> {
        self.concepts
            .iter()
            .flat_map(|(c, ims)| {
                ims.iter().map(move |im| ConceptIndexEntry {
                    concept: c.clone(),
                    path: im.path.clone(),
                })
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> impl Iterator<Item = &ConceptLabel> {
        self.concepts.keys()
    }

    pub fn images(&self, concept: &ConceptLabel) -> &[ImageRef] {
        self.concepts.get(concept).map_or(&[], Vec::as_slice)
    }

    pub fn concept_of(&self, path: &str) -> Option<&ConceptLabel> {
        self.concepts
            .iter()
            .find(|(_, ims)| ims.iter().any(|im| im.path == path))
            .map(|(c, _)| c)
    }
}

pub const DEFAULT_TARGETED_TEMPLATE: &str = "Caption the image containing a {object}";
pub const UNTARGETED_PROMPT: &str = "caption the images";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct L3Config {
    pub num_distractors: usize,
    pub caption_provider: String,
    pub prompt_template_targeted: String,
    pub prompt_untargeted: String,
}

impl Default for L3Config {
    fn default() -> Self {
        Self {
            num_distractors: 3,
            caption_provider: "mock".into(),
            prompt_template_targeted: DEFAULT_TARGETED_TEMPLATE.into(),
            prompt_untargeted: UNTARGETED_PROMPT.into(),
        }
    }
}

impl L3Config {
    pub fn validate(&self) -> Result<(), L3Error> {
        if !(2..MAX_IMAGES).contains(&self.num_distractors) {
            return Err(L3Error::Config(format!(
                "num_distractors {} outside 2..={}",
                self.num_distractors,
                MAX_IMAGES - 1
            )));
        }
        if !self.prompt_template_targeted.contains("{object}") {
            return Err(L3Error::Config("targeted template needs an {object} slot".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct L3Set {
    pub target: ImageRef,
    pub images: Vec<ImageRef>,
    /// 0-based slot of the target in `images`.
    pub target_pos: usize,
}

pub fn assemble_l3_set(index: &ConceptIndex, cfg: &L3Config, rng: &mut Rng) -> Result<L3Set, L3Error> {
    cfg.validate()?;
    let need = cfg.num_distractors + 1;
    if index.len() < need {
        return Err(L3Error::InsufficientConcepts { need, have: index.len() });
    }
    let concepts: Vec<&ConceptLabel> = index.concepts().collect();
    let picks = rng.sample_indices(concepts.len(), need);
    let mut images: Vec<ImageRef> = picks
        .iter()
        .map(|&c| {
            let pool = index.images(concepts[c]);
            pool[rng.index(pool.len())].clone()
        })
        .collect();
    let target = images.remove(0);
    let target_pos = rng.index(need);
    images.insert(target_pos, target.clone());
    Ok(L3Set {
        target,
        images,
        target_pos,
    })
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("image `{0}` has no concept label")]
    MissingConcept(String),
    #[error("request to {url} failed: {message}")]
    Http { url: String, message: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
    #[error("reading image {path}: {source}")]
    Image { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetedCaption {
    pub caption: String,
    pub primary_object: String,
}

pub trait CaptionProvider {
    fn id(&self) -> &str;
    fn targeted_caption(&mut self, image: &ImageRef) -> Result<TargetedCaption, ProviderError>;
    fn untargeted_caption(&mut self, images: &[ImageRef], instruction: &str) -> Result<String, ProviderError>;
}

impl<P: CaptionProvider + ?Sized> CaptionProvider for &mut P {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn targeted_caption(&mut self, image: &ImageRef) -> Result<TargetedCaption, ProviderError> {
        (**self).targeted_caption(image)
    }
    fn untargeted_caption(&mut self, images: &[ImageRef], instruction: &str) -> Result<String, ProviderError> {
        (**self).untargeted_caption(images, instruction)
    }
}

impl<P: CaptionProvider + ?Sized> CaptionProvider for Box<P> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn targeted_caption(&mut self, image: &ImageRef) -> Result<TargetedCaption, ProviderError> {
        (**self).targeted_caption(image)
    }
    fn untargeted_caption(&mut self, images: &[ImageRef], instruction: &str) -> Result<String, ProviderError> {
        (**self).untargeted_caption(images, instruction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderCall {
    Targeted(String),
    Untargeted(Vec<String>),
}

/// Template captions built from concept labels. Wording varies with
/// `(seed, path)` but never with call order.
#[derive(Debug, Clone)]
pub struct MockCaptionProvider {
    seed: u64,
    id: String,
    pub calls: Vec<ProviderCall>,
}

const MOCK_TAILS: [&str; 4] = [
    "centered in the frame with soft natural light",
    "seen up close against a plain background",
    "with fine texture and color visible in every detail",
    "photographed outdoors on a clear day",
];

impl MockCaptionProvider {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            id: "mock".into(),
            calls: Vec::new(),
        }
    }

    fn tail(&self, path: &str) -> &'static str {
        let d = Sha256::new().chain_update(self.seed.to_le_bytes()).chain_update(path.as_bytes()).finalize();
        MOCK_TAILS[usize::from(d[0]) % MOCK_TAILS.len()]
    }
}

fn concept_of(image: &ImageRef) -> Result<&ConceptLabel, ProviderError> {
    image.concept.as_ref().ok_or_else(|| ProviderError::MissingConcept(image.path.clone()))
}

impl CaptionProvider for MockCaptionProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn targeted_caption(&mut self, image: &ImageRef) -> Result<TargetedCaption, ProviderError> {
        self.calls.push(ProviderCall::Targeted(image.path.clone()));
        let c = concept_of(image)?;
        Ok(TargetedCaption {
            caption: format!("A detailed photo of a {c}, {}.", self.tail(&image.path)),
            primary_object: c.to_string(),
        })
    }

    fn untargeted_caption(&mut self, images: &[ImageRef], _instruction: &str) -> Result<String, ProviderError> {
        self.calls.push(ProviderCall::Untargeted(images.iter().map(|im| im.path.clone()).collect()));
        let names = images
            .iter()
            .map(|im| concept_of(im).map(|c| format!("a {c}")))
            .collect::<Result<Vec<_>, _>>()?;
        let list = match names.as_slice() {
            [] => String::new(),
            [one] => one.clone(),
            [init @ .., last] => format!("{}, and {last}", init.join(", ")),
        };
        Ok(format!("The images show {list}."))
    }
}

/// Wraps a provider with an on-disk response cache keyed by provider id and
/// request digest.
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
    hits: Cell<u64>,
    misses: Cell<u64>,
}

#[derive(Serialize)]
struct CacheKey<'a> {
    provider: &'a str,
    kind: &'a str,
    instruction: &'a str,
    images: Vec<&'a str>,
}

impl<P: CaptionProvider> CachedProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Result<Self, ProviderError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| ProviderError::Cache {
            path: dir.clone(),
            message: e.to_string(),
        })?;
        Ok(Self {
            inner,
            dir,
            hits: Cell::new(0),
            misses: Cell::new(0),
        })
    }

    pub fn hits(&self) -> u64 {
        self.hits.get()
    }

    pub fn misses(&self) -> u64 {
        self.misses.get()
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits() + self.misses();
        if total == 0 {
            0.0
        } else {
            self.hits() as f64 / total as f64
        }
    }

    pub fn into_inner(self) -> P {
        self.inner
    }

    fn path_for(&self, key: &CacheKey<'_>) -> PathBuf {
        let bytes = serde_json::to_vec(key).expect("cache key serializes");
        self.dir.join(format!("{}.json", hex::encode(Sha256::digest(&bytes))))
    }

    fn cached<T, F>(&mut self, key: CacheKey<'_>, fetch: F) -> Result<T, ProviderError>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: FnOnce(&mut P) -> Result<T, ProviderError>,
    {
        let path = self.path_for(&key);
        let cache_err = |path: &Path, e: &dyn std::fmt::Display| ProviderError::Cache {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        if let Ok(bytes) = fs::read(&path) {
            let value = serde_json::from_slice(&bytes).map_err(|e| cache_err(&path, &e))?;
            self.hits.set(self.hits.get() + 1);
            return Ok(value);
        }
        self.misses.set(self.misses.get() + 1);
        let value = fetch(&mut self.inner)?;
        let bytes = serde_json::to_vec(&value).map_err(|e| cache_err(&path, &e))?;
        // Write then rename so a crash never leaves a truncated entry.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, &path)).map_err(|e| cache_err(&path, &e))?;
        Ok(value)
    }
}

impl<P: CaptionProvider> CaptionProvider for CachedProvider<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn targeted_caption(&mut self, image: &ImageRef) -> Result<TargetedCaption, ProviderError> {
        let id = self.inner.id().to_string();
        let key = CacheKey {
            provider: &id,
            kind: "targeted",
            instruction: TARGETED_REQUEST,
            images: vec![&image.path],
        };
        self.cached(key, |p| p.targeted_caption(image))
    }

    fn untargeted_caption(&mut self, images: &[ImageRef], instruction: &str) -> Result<String, ProviderError> {
        let id = self.inner.id().to_string();
        let key = CacheKey {
            provider: &id,
            kind: "untargeted",
            instruction,
            images: images.iter().map(|im| im.path.as_str()).collect(),
        };
        self.cached(key, |p| p.untargeted_caption(images, instruction))
    }
}

const TARGETED_REQUEST: &str = "Write a detailed caption of this image and name its primary object. \
Reply with JSON only: {\"caption\": \"...\", \"primary_object\": \"...\"}";

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpCaptionProvider {
    id: String,
    url: String,
    model: String,
    api_key: Option<String>,
    image_root: PathBuf,
    agent: ureq::Agent,
}

impl HttpCaptionProvider {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, image_root: impl Into<PathBuf>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            id: format!("openai-compat:{model}"),
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
            image_root: image_root.into(),
            agent,
        }
    }

    fn image_part(&self, image: &ImageRef) -> Result<serde_json::Value, ProviderError> {
        let path = self.image_root.join(&image.path);
        let bytes = fs::read(&path).map_err(|source| ProviderError::Image { path: path.clone(), source })?;
        let mime = match path.extension().and_then(|e| e.to_str()) {
            Some("jpg" | "jpeg") => "image/jpeg",
            _ => "image/png",
        };
        let data = base64::engine::general_purpose::STANDARD.encode(bytes);
        Ok(serde_json::json!({
            "type": "image_url",
            "image_url": { "url": format!("data:{mime};base64,{data}") }
        }))
    }

    fn chat(&self, images: &[ImageRef], text: &str) -> Result<String, ProviderError> {
        let mut content = Vec::with_capacity(images.len() + 1);
        for im in images {
            content.push(self.image_part(im)?);
        }
        content.push(serde_json::json!({ "type": "text", "text": text }));
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{ "role": "user", "content": content }],
        });
        let http = |e: ureq::Error| ProviderError::Http {
            url: self.url.clone(),
            message: e.to_string(),
        };
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let reply: serde_json::Value = req.send_json(&body).map_err(http)?.body_mut().read_json().map_err(http)?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Malformed("no choices[0].message.content".into()))
    }
}

impl CaptionProvider for HttpCaptionProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn targeted_caption(&mut self, image: &ImageRef) -> Result<TargetedCaption, ProviderError> {
        let text = self.chat(std::slice::from_ref(image), TARGETED_REQUEST)?;
        let start = text.find('{');
        let end = text.rfind('}');
        let json = match (start, end) {
            (Some(s), Some(e)) if s < e => &text[s..=e],
            _ => return Err(ProviderError::Malformed(format!("no JSON object in `{text}`"))),
        };
        let parsed: TargetedCaption = serde_json::from_str(json).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        if parsed.caption.trim().is_empty() || parsed.primary_object.trim().is_empty() {
            return Err(ProviderError::Malformed("empty caption or primary object".into()));
        }
        Ok(parsed)
    }

    fn untargeted_caption(&mut self, images: &[ImageRef], instruction: &str) -> Result<String, ProviderError> {
        self.chat(images, instruction)
    }
}

pub fn make_l3_pair<P: CaptionProvider + ?Sized>(
    set: &L3Set,
    provider: &mut P,
    cfg: &L3Config,
    id: String,
) -> Result<PreferenceSample, L3Error> {
    let targeted = provider.targeted_caption(&set.target)?;
    let object = targeted.primary_object.trim().to_lowercase();
    for (slot, im) in set.images.iter().enumerate() {
        if slot != set.target_pos && im.concept.as_ref().is_some_and(|c| c.as_str() == object) {
            return Err(L3Error::Collision { object, slot: slot + 1 });
        }
    }
    let rejected = provider.untargeted_caption(&set.images, &cfg.prompt_untargeted)?;
    let mut meta = BTreeMap::new();
    meta.insert("target_pos".into(), (set.target_pos + 1).to_string());
    if let Some(c) = &set.target.concept {
        meta.insert("concept".into(), c.to_string());
    }
    meta.insert("primary_object".into(), targeted.primary_object.clone());
    meta.insert("provider".into(), provider.id().to_string());
    Ok(PreferenceSample {
        id,
        level: Level::L3,
        images: set.images.clone(),
        prompt: cfg.prompt_template_targeted.replace("{object}", targeted.primary_object.trim()),
        chosen: targeted.caption,
        rejected,
        meta,
    })
}

/// Assemble and caption one sample; the id and `seed` meta come from `rng`.
pub fn make_l3_sample<P: CaptionProvider + ?Sized>(
    index: &ConceptIndex,
    provider: &mut P,
    cfg: &L3Config,
    rng: &mut Rng,
) -> Result<PreferenceSample, L3Error> {
    let set = assemble_l3_set(index, cfg, rng)?;
    let mut s = make_l3_pair(&set, provider, cfg, format!("l3-{:016x}", rng.seed()))?;
    s.meta.insert("seed".into(), rng.seed().to_string());
    Ok(s)
}

pub fn probe_question(concept: &ConceptLabel) -> String {
    format!("Which of the following images contains {concept}?")
}

pub fn make_l3_probe(index: &ConceptIndex, cfg: &L3Config, rng: &mut Rng) -> Result<EvalItem, L3Error> {
    let set = assemble_l3_set(index, cfg, rng)?;
    let concept = set.target.concept.clone().expect("index images carry concepts");
    Ok(EvalItem {
        id: format!("probe-{:016x}", rng.seed()),
        level: Some(Level::L3),
        question: probe_question(&concept),
        options: (1..=set.images.len()).map(|k| format!("Image {k}")).collect(),
        answer_key: set.target_pos,
        images: set.images,
    })
}

/// Concepts appearing more than once among `images`.
pub fn duplicate_concepts(images: &[ImageRef]) -> Vec<ConceptLabel> {
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();
    for c in images.iter().filter_map(|im| im.concept.clone()) {
        if !seen.insert(c.clone()) {
            dup.insert(c);
        }
    }
    dup.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fake_http::{FakeServer, Reply};

    fn index(names: &[&str], per: usize) -> ConceptIndex {
        ConceptIndex::from_entries(names.iter().flat_map(|n| {
            (0..per).map(move |i| ConceptIndexEntry {
                concept: ConceptLabel::new(n).unwrap(),
                path: format!("{}/{i}.png", n.replace(' ', "_")),
            })
        }))
        .unwrap()
    }

    const NAMES: [&str; 8] = ["peacock", "tiger cat", "canoe", "violin", "lemon", "zebra", "kite", "teapot"];

    #[test]
    fn four_concepts_three_distractors_uses_each_once() {
        let idx = index(&NAMES[..4], 3);
        for seed in 0..50 {
            let set = assemble_l3_set(&idx, &L3Config::default(), &mut Rng::new(seed)).unwrap();
            let mut cs: Vec<String> = set.images.iter().map(|im| im.concept.clone().unwrap().to_string()).collect();
            cs.sort();
            assert_eq!(cs, vec!["canoe", "peacock", "tiger cat", "violin"]);
            assert_eq!(set.images[set.target_pos], set.target);
        }
    }

    #[test]
    fn too_few_concepts() {
        let idx = index(&NAMES[..3], 2);
        let err = assemble_l3_set(&idx, &L3Config::default(), &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, L3Error::InsufficientConcepts { need: 4, have: 3 }));
    }

    #[test]
    fn distractor_bounds() {
        for n in [1, 6] {
            let cfg = L3Config {
                num_distractors: n,
                ..L3Config::default()
            };
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn image_under_two_concepts_is_rejected() {
        let entries = vec![
            ConceptIndexEntry {
                concept: ConceptLabel::new("a").unwrap(),
                path: "x.png".into(),
            },
            ConceptIndexEntry {
                concept: ConceptLabel::new("b").unwrap(),
                path: "x.png".into(),
            },
        ];
        assert!(matches!(ConceptIndex::from_entries(entries), Err(L3Error::DuplicateImage { .. })));
    }

    #[test]
    fn pair_fields_and_call_log() {
        let idx = index(&NAMES, 2);
        let cfg = L3Config::default();
        let mut p = MockCaptionProvider::new(0);
        let set = assemble_l3_set(&idx, &cfg, &mut Rng::new(4)).unwrap();
        let s = make_l3_pair(&set, &mut p, &cfg, "x".into()).unwrap();
        let c = set.target.concept.clone().unwrap();
        assert_eq!(s.prompt, format!("Caption the image containing a {c}"));
        assert!(s.chosen.starts_with(&format!("A detailed photo of a {c}")));
        assert_eq!(s.meta["target_pos"], (set.target_pos + 1).to_string());
        assert_eq!(s.meta["provider"], "mock");
        // Chosen depends on the target alone, rejected on the full set.
        assert_eq!(
            p.calls,
            vec![
                ProviderCall::Targeted(set.target.path.clone()),
                ProviderCall::Untargeted(set.images.iter().map(|im| im.path.clone()).collect()),
            ]
        );
        s.validate().unwrap();
    }

    struct Liar;
    impl CaptionProvider for Liar {
        fn id(&self) -> &str {
            "liar"
        }
        fn targeted_caption(&mut self, _: &ImageRef) -> Result<TargetedCaption, ProviderError> {
            Ok(TargetedCaption {
                caption: "A canoe.".into(),
                primary_object: "Canoe".into(),
            })
        }
        fn untargeted_caption(&mut self, _: &[ImageRef], _: &str) -> Result<String, ProviderError> {
            Ok("Things.".into())
        }
    }

    #[test]
    fn primary_object_matching_a_distractor_is_rejected() {
        let idx = index(&NAMES[..4], 1);
        let cfg = L3Config::default();
        for seed in 0..20 {
            let set = assemble_l3_set(&idx, &cfg, &mut Rng::new(seed)).unwrap();
            let res = make_l3_pair(&set, &mut Liar, &cfg, "x".into());
            let target_is_canoe = set.target.concept.as_ref().unwrap().as_str() == "canoe";
            assert_eq!(res.is_ok(), target_is_canoe);
        }
    }

    #[test]
    fn probes_name_spaced_concepts_verbatim() {
        let idx = index(&["tiger cat", "canoe", "lemon"], 1);
        let cfg = L3Config {
            num_distractors: 2,
            ..L3Config::default()
        };
        for seed in 0..30 {
            let p = make_l3_probe(&idx, &cfg, &mut Rng::new(seed)).unwrap();
            let target = p.images[p.answer_key].concept.clone().unwrap();
            assert_eq!(p.question, format!("Which of the following images contains {target}?"));
            assert_eq!(p.options, vec!["Image 1", "Image 2", "Image 3"]);
        }
        let p = (0..)
            .map(|s| make_l3_probe(&idx, &cfg, &mut Rng::new(s)).unwrap())
            .find(|p| p.images[p.answer_key].concept.as_ref().unwrap().as_str() == "tiger cat")
            .unwrap();
        assert!(p.question.contains("contains tiger cat?"));
    }

    #[test]
    fn cache_hits_everything_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let idx = index(&NAMES, 2);
        let cfg = L3Config::default();
        let run = || {
            let mut p = CachedProvider::new(MockCaptionProvider::new(0), dir.path()).unwrap();
            let samples: Vec<PreferenceSample> = (0..20)
                .map(|i| make_l3_sample(&idx, &mut p, &cfg, &mut Rng::new(1).substream("l3", i)).unwrap())
                .collect();
            (samples, p.hit_rate(), p.into_inner().calls.len())
        };
        let (a, _, first_calls) = run();
        let (b, rate, second_calls) = run();
        assert_eq!(a, b);
        assert!(first_calls > 0);
        assert_eq!(second_calls, 0);
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn http_provider_speaks_chat_schema() {
        let server = FakeServer::start(|req| {
            let body: serde_json::Value = serde_json::from_slice(&req.body).unwrap();
            let content = body["messages"][0]["content"].as_array().unwrap();
            let images = content.iter().filter(|c| c["type"] == "image_url").count();
            let url = content[0]["image_url"]["url"].as_str().unwrap();
            assert!(url.starts_with("data:image/png;base64,"));
            let text = content.last().unwrap()["text"].as_str().unwrap();
            let reply = if text.contains("primary object") {
                r#"Sure: {"caption": "A peacock fanning its tail.", "primary_object": "peacock"}"#.to_string()
            } else {
                format!("{images} birds and things.")
            };
            Reply::json(200, serde_json::json!({ "choices": [{ "message": { "content": reply } }] }).to_string())
        });
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "b.png"] {
            fs::write(dir.path().join(name), b"\x89PNG fake").unwrap();
        }
        let mut p = HttpCaptionProvider::new(&server.url, "vlm", None, dir.path());
        let t = p.targeted_caption(&ImageRef::new("a.png")).unwrap();
        assert_eq!(t.primary_object, "peacock");
        let u = p
            .untargeted_caption(&[ImageRef::new("a.png"), ImageRef::new("b.png")], UNTARGETED_PROMPT)
            .unwrap();
        assert_eq!(u, "2 birds and things.");
        assert!(server.requests().iter().all(|(m, path)| m == "POST" && path == "/chat/completions"));
    }

    #[test]
    fn http_provider_surfaces_failures() {
        let server = FakeServer::start(|_| Reply::json(500, "{}"));
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"x").unwrap();
        let mut p = HttpCaptionProvider::new(&server.url, "vlm", None, dir.path());
        assert!(matches!(p.targeted_caption(&ImageRef::new("a.png")), Err(ProviderError::Http { .. })));
        assert!(matches!(p.targeted_caption(&ImageRef::new("missing.png")), Err(ProviderError::Image { .. })));
    }
}
