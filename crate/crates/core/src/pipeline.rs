//! Reproducible runs: config file, per-command drivers, and manifests.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! <level>/data.jsonl, images/, stats.json, manifest.json
//! <level>/data.filtered.jsonl, data.filter_report.json, data.filter_manifest.json
//! train/<schedule>__<objective>/policy.json, reports.json, loss.csv, epochs.csv, manifest.json
//! train/comparison_<objective>.{md,csv}
//! eval/probes.jsonl, eval.json, summary.md, manifest.json
//! cache/captions/
//! ```
//!
//! Image paths inside input files are relative to the directory holding
//! that file. Image paths inside datasets are relative to the dataset
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufReader};
use std::path::{Component, Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arith::make_arith_sample;
use crate::eval::{score_mc, EvalItem, EvalScore};
use crate::filter::{check_conformance, filter_scoped, EmbedError, Embedder, FilterError, FilterReport, FilterScope, HttpEmbedder, MockEmbedder};
use crate::jsonl::{read_jsonl, read_records, write_jsonl, write_records, DatasetError};
use crate::kinship::{make_kinship_sample, KinManifestEntry, KinshipError, KinshipGraph};
use crate::l1::{make_l1_sample, L1Config, L1Error, L1Sources, VqaRecord};
use crate::l3::{make_l3_probe, make_l3_sample, CachedProvider, CaptionProvider, ConceptIndex, HttpCaptionProvider, L3Config, L3Error, MockCaptionProvider, ProviderError};
use crate::policy::{build_examples, Choice, Featurizer, LogLinearPolicy, PreferenceExample};
use crate::rng::Rng;
use crate::scene::{L2Config, SceneError};
use crate::schedule::{build_schedule, comparison_csv, comparison_markdown, run_schedule, ComparisonRow, SchedulePlan, ScheduleError};
use crate::train::{Objective, TrainConfig, TrainError, TrainReport};
use crate::types::{ImageRef, Level, PreferenceSample, TaskLevel};
use crate::dpo::DpoConfig;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const EMBED_URL_ENV: &str = "PREFFORGE_EMBED_URL";
pub const PROVIDER_KEY_ENV: &str = "PREFFORGE_PROVIDER_API_KEY";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error("external service: {0}")]
    External(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl PipelineError {
    /// 1 config, 2 input data, 3 external service.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Input(_) | PipelineError::Io { .. } => 2,
            PipelineError::External(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        PipelineError::Input(e.to_string())
    }
}

impl From<FilterError> for PipelineError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::Embed(EmbedError::Unreachable(_) | EmbedError::Rejected(_) | EmbedError::Protocol(_)) => {
                PipelineError::External(e.to_string())
            }
            other => PipelineError::Input(other.to_string()),
        }
    }
}

impl From<ScheduleError> for PipelineError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::Parse { .. } | ScheduleError::Budget { .. } | ScheduleError::NoBudget => PipelineError::Config(e.to_string()),
            ScheduleError::MissingData(_) => PipelineError::Input(e.to_string()),
            ScheduleError::Train(TrainError::Config(_)) => PipelineError::Config(e.to_string()),
            ScheduleError::Train(_) => PipelineError::Input(e.to_string()),
        }
    }
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Counts {
    pub l1: usize,
    pub l2_kin: usize,
    pub l2_arith: usize,
    pub l3: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            l1: 20_000,
            l2_kin: 20_000,
            l2_arith: 20_000,
            l3: 20_000,
        }
    }
}

impl Counts {
    pub fn get(&self, level: Level) -> usize {
        match level {
            Level::L1 => self.l1,
            Level::L2Kin => self.l2_kin,
            Level::L2Arith => self.l2_arith,
            Level::L3 => self.l3,
        }
    }

    pub fn set(&mut self, level: Level, n: usize) {
        match level {
            Level::L1 => self.l1 = n,
            Level::L2Kin => self.l2_kin = n,
            Level::L2Arith => self.l2_arith = n,
            Level::L3 => self.l3 = n,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// VQA records for L1.
    pub vqa: Option<PathBuf>,
    /// Extra distractor images for L1. Without it, other records' images are used.
    pub distractors: Option<PathBuf>,
    pub kin_manifest: Option<PathBuf>,
    pub concept_index: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    /// Base URL of an OpenAI-compatible endpoint, used when
    /// `l3.caption_provider = "http"`.
    pub url: Option<String>,
    pub model: String,
    /// Defaults to `<out_dir>/cache/captions`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            url: None,
            model: "caption-model".into(),
            cache_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// `"mock"` or the sidecar base URL.
    pub embedder: String,
    pub scope: FilterScope,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            embedder: "mock".into(),
            scope: FilterScope::Corpus,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub objective: Objective,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub step_size: f64,
    pub batch_size: usize,
    /// Total update budget shared by every schedule. Defaults to
    /// `epochs · ceil(n / batch_size)` over all examples the schedules touch.
    pub steps: Option<usize>,
    /// Schedules to run and compare.
    pub schedules: Vec<String>,
    /// Extra candidates per example beyond chosen and rejected.
    pub alternates: usize,
    pub hash_dim: usize,
    /// Prefer `data.filtered.jsonl` when present.
    pub use_filtered: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = DpoConfig::default();
        let t = TrainConfig::default();
        Self {
            objective: t.objective,
            beta: d.beta,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            step_size: t.step_size,
            batch_size: t.batch_size,
            steps: None,
            schedules: vec!["(L1∪L2∪L3) flat".into()],
            alternates: 2,
            hash_dim: Featurizer::default().hash_dim,
            use_filtered: true,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dpo: DpoConfig {
                beta: self.beta,
                learning_rate: self.learning_rate,
                epochs: self.epochs,
            },
            objective: self.objective,
            step_size: self.step_size,
            batch_size: self.batch_size,
        }
    }

    pub fn featurizer(&self) -> Featurizer {
        Featurizer { hash_dim: self.hash_dim }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { probes: 500 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub counts: Counts,
    pub inputs: Inputs,
    pub l1: L1Config,
    pub l2: L2Config,
    pub l3: L3Config,
    pub provider: ProviderConfig,
    pub filter: FilterConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            counts: Counts::default(),
            inputs: Inputs::default(),
            l1: L1Config::default(),
            l2: L2Config::default(),
            l3: L3Config::default(),
            provider: ProviderConfig::default(),
            filter: FilterConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the config with `out_dir` blanked, so identical runs in
    /// different directories share a digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.l1.validate().map_err(|e| cfg(&e))?;
        self.l2.validate().map_err(|e| cfg(&e))?;
        self.l3.validate().map_err(|e| cfg(&e))?;
        self.train.train_config().validate().map_err(|e| cfg(&e))?;
        if self.train.schedules.is_empty() {
            return Err(PipelineError::Config("train.schedules is empty".into()));
        }
        if self.train.hash_dim == 0 {
            return Err(PipelineError::Config("train.hash_dim must be positive".into()));
        }
        if self.eval.probes == 0 {
            return Err(PipelineError::Config("eval.probes must be positive".into()));
        }
        if let FilterScope::PerBatch(n) = self.filter.scope {
            if n < crate::filter::MIN_BATCH {
                return Err(PipelineError::Config(format!("per-batch scope of {n} is below {}", crate::filter::MIN_BATCH)));
            }
        }
        Ok(())
    }

    fn caption_cache_dir(&self) -> PathBuf {
        self.provider.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache").join("captions"))
    }
}

// ---------------------------------------------------------------- outputs

/// Records in a manifest next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_digest: String,
    /// Input file → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the manifest's directory → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Writes files under one directory and remembers their digests.
struct Outputs {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn new(root: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn finish(mut self, name: &str, command: &str, cfg: &RunConfig, inputs: BTreeMap<String, String>) -> Result<Manifest, PipelineError> {
        let manifest = Manifest {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            seed: cfg.seed,
            config_digest: cfg.digest(),
            inputs,
            outputs: std::mem::take(&mut self.files),
        };
        self.write_json(name, &manifest)?;
        Ok(manifest)
    }
}

/// Inputs under `out_dir` are keyed relative to it, others as given.
fn input_digests(cfg: &RunConfig, paths: &[&Path]) -> Result<BTreeMap<String, String>, PipelineError> {
    paths
        .iter()
        .map(|p| {
            let key = p.strip_prefix(&cfg.out_dir).map(|r| r.display().to_string()).unwrap_or_else(|_| p.display().to_string());
            Ok((key, digest_file(p)?))
        })
        .collect()
}

// ---------------------------------------------------------------- inputs

fn open(path: &Path) -> Result<BufReader<fs::File>, PipelineError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, PipelineError> {
    path.as_deref().ok_or_else(|| PipelineError::Input(format!("missing input: inputs.{what} is not set")))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn safe_relative(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

/// Maps dataset-relative image names to the files they are copied from.
#[derive(Default)]
struct ImageSources {
    map: BTreeMap<String, PathBuf>,
}

impl ImageSources {
    fn register(&mut self, root: &Path, image: &ImageRef) -> Result<(), PipelineError> {
        if !safe_relative(&image.path) {
            return Err(PipelineError::Input(format!("image path `{}` must be relative without `..`", image.path)));
        }
        let src = root.join(&image.path);
        match self.map.get(&image.path) {
            Some(prev) if *prev != src => Err(PipelineError::Input(format!(
                "image `{}` resolves to both {} and {}",
                image.path,
                prev.display(),
                src.display()
            ))),
            _ => {
                self.map.insert(image.path.clone(), src);
                Ok(())
            }
        }
    }

    /// Copies every image of `s` into `images/` and rewrites its paths.
    fn localize(&self, s: &mut PreferenceSample, out: &mut Outputs) -> Result<(), PipelineError> {
        for im in &mut s.images {
            let dest = format!("images/{}", im.path);
            if !out.files.contains_key(&dest) {
                let src = self
                    .map
                    .get(&im.path)
                    .ok_or_else(|| PipelineError::Input(format!("image `{}` has no source", im.path)))?;
                let bytes = fs::read(src).map_err(|e| PipelineError::Input(format!("{}: {e}", src.display())))?;
                out.write(&dest, &bytes)?;
            }
            im.path = dest;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderStats {
    pub id: String,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub cache_hit_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenStats {
    pub level: Level,
    pub count: usize,
    pub attempts: usize,
    pub level_mix: BTreeMap<String, usize>,
    pub mean_images_per_sample: f64,
    pub drop_reasons: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub provider: Option<ProviderStats>,
}

/// What to do with a failed draw.
enum Outcome {
    Drop(&'static str),
    Fatal(PipelineError),
}

fn l1_outcome(e: L1Error) -> Outcome {
    match e {
        L1Error::PoolExhausted { .. } => Outcome::Drop("distractor_pool_exhausted"),
        L1Error::MissingWrongAnswer => Outcome::Drop("missing_wrong_answer"),
        L1Error::NoDonor(_) => Outcome::Drop("no_swap_donor"),
        L1Error::Config(_) | L1Error::NoClient => Outcome::Fatal(PipelineError::Config(e.to_string())),
        L1Error::InvalidRecord(_) => Outcome::Fatal(PipelineError::Input(e.to_string())),
        L1Error::Client(_) => Outcome::Fatal(PipelineError::External(e.to_string())),
    }
}

fn scene_outcome(e: SceneError) -> Outcome {
    match e {
        SceneError::Placement { .. } => Outcome::Drop("placement_failed"),
        SceneError::Config(_) => Outcome::Fatal(PipelineError::Config(e.to_string())),
        SceneError::Encode(_) => Outcome::Fatal(PipelineError::Input(e.to_string())),
    }
}

fn kin_outcome(e: KinshipError) -> Outcome {
    match e {
        KinshipError::NoDefinedQuery(_) | KinshipError::Undefined { .. } => Outcome::Drop("no_defined_query"),
        KinshipError::Config(s) => scene_outcome(s),
        other => Outcome::Fatal(PipelineError::Input(other.to_string())),
    }
}

fn provider_error(e: ProviderError) -> PipelineError {
    match e {
        ProviderError::Http { .. } | ProviderError::Malformed(_) => PipelineError::External(e.to_string()),
        other => PipelineError::Input(other.to_string()),
    }
}

fn l3_outcome(e: L3Error) -> Outcome {
    match e {
        L3Error::Collision { .. } => Outcome::Drop("primary_object_collision"),
        L3Error::Config(_) => Outcome::Fatal(PipelineError::Config(e.to_string())),
        L3Error::Provider(p) => Outcome::Fatal(provider_error(p)),
        other => Outcome::Fatal(PipelineError::Input(other.to_string())),
    }
}

fn load_concept_index(path: &Path) -> Result<ConceptIndex, PipelineError> {
    ConceptIndex::read_jsonl(open(path)?).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))
}

fn make_provider(cfg: &RunConfig, image_root: &Path) -> Result<Box<dyn CaptionProvider>, PipelineError> {
    match cfg.l3.caption_provider.as_str() {
        "mock" => Ok(Box::new(MockCaptionProvider::new(cfg.seed))),
        "http" => {
            let url = cfg
                .provider
                .url
                .as_deref()
                .ok_or_else(|| PipelineError::Config("provider.url is required for the http caption provider".into()))?;
            let key = std::env::var(PROVIDER_KEY_ENV).ok();
            Ok(Box::new(HttpCaptionProvider::new(url, &cfg.provider.model, key, image_root)))
        }
        other => Err(PipelineError::Config(format!("unknown caption provider `{other}` (expected mock or http)"))),
    }
}

/// Draw up to this many times per requested sample before giving up.
const MAX_ATTEMPTS_PER_SAMPLE: usize = 4;

/// Generate one level's dataset under `<out_dir>/<slug>/`.
pub fn cmd_gen(cfg: &RunConfig, level: Level) -> Result<GenStats, PipelineError> {
    cfg.validate()?;
    let count = cfg.counts.get(level);
    if count == 0 {
        return Err(PipelineError::Config(format!("count for {} must be positive", level.as_str())));
    }
    let dir = cfg.out_dir.join(level.slug());
    if dir.join("images").exists() {
        fs::remove_dir_all(dir.join("images")).map_err(io_err(&dir))?;
    }
    let mut out = Outputs::new(&dir)?;
    let base = Rng::new(cfg.seed);
    let mut sources = ImageSources::default();
    let mut input_files: Vec<PathBuf> = Vec::new();

    // One draw per call; the closure owns the level-specific state.
    let mut provider_stats = None;
    let mut samples = Vec::with_capacity(count);
    let mut drops: BTreeMap<String, usize> = BTreeMap::new();
    let mut attempts = 0;
    let mut run = |draw: &mut dyn FnMut(usize, &mut Rng, &mut Outputs) -> Result<PreferenceSample, Outcome>,
                   out: &mut Outputs|
     -> Result<(), PipelineError> {
        let max = count * MAX_ATTEMPTS_PER_SAMPLE;
        while samples.len() < count {
            if attempts == max {
                return Err(PipelineError::Input(format!(
                    "{}: only {} of {count} samples after {max} draws; drop reasons {drops:?}",
                    level.as_str(),
                    samples.len()
                )));
            }
            let i = attempts;
            attempts += 1;
            let mut rng = base.substream(level.slug(), i as u64);
            match draw(i, &mut rng, out) {
                Ok(s) => samples.push(s),
                Err(Outcome::Drop(reason)) => {
                    log::debug!("{} draw {i} (seed {:016x}) dropped: {reason}", level.as_str(), rng.seed());
                    *drops.entry(reason.to_string()).or_default() += 1;
                }
                Err(Outcome::Fatal(e)) => {
                    let seed = base.substream(level.slug(), i as u64).seed();
                    return Err(match e {
                        PipelineError::Config(m) => PipelineError::Config(format!("draw {i} (seed {seed:016x}): {m}")),
                        PipelineError::Input(m) => PipelineError::Input(format!("draw {i} (seed {seed:016x}): {m}")),
                        PipelineError::External(m) => PipelineError::External(format!("draw {i} (seed {seed:016x}): {m}")),
                        io @ PipelineError::Io { .. } => io,
                    });
                }
            }
        }
        Ok(())
    };

    match level {
        Level::L1 => {
            let vqa = required(&cfg.inputs.vqa, "vqa")?;
            input_files.push(vqa.to_path_buf());
            let root = parent_dir(vqa);
            let records: Vec<VqaRecord> = read_records(open(vqa)?)?.into_iter().map(|(_, r)| r).collect();
            if records.is_empty() {
                return Err(PipelineError::Input(format!("{}: no records", vqa.display())));
            }
            for r in &records {
                sources.register(&root, &r.image)?;
            }
            let pool: Vec<ImageRef> = match &cfg.inputs.distractors {
                Some(p) => {
                    input_files.push(p.clone());
                    let droot = parent_dir(p);
                    let pool: Vec<ImageRef> = read_records(open(p)?)?.into_iter().map(|(_, r)| r).collect();
                    for im in &pool {
                        sources.register(&droot, im)?;
                    }
                    pool
                }
                None => records.iter().map(|r| r.image.clone()).collect(),
            };
            let src = L1Sources {
                distractors: &pool,
                donors: &records,
                client: None,
            };
            run(
                &mut |i, rng, out| {
                    let mut s = make_l1_sample(&records[i % records.len()], src, &cfg.l1, rng).map_err(l1_outcome)?;
                    sources.localize(&mut s, out).map_err(Outcome::Fatal)?;
                    Ok(s)
                },
                &mut out,
            )?;
        }
        Level::L2Kin => {
            let path = required(&cfg.inputs.kin_manifest, "kin_manifest")?;
            input_files.push(path.to_path_buf());
            let root = parent_dir(path);
            let entries: Vec<KinManifestEntry> = read_records(open(path)?)?.into_iter().map(|(_, e)| e).collect();
            for e in &entries {
                sources.register(&root, &e.image)?;
            }
            let graph = KinshipGraph::build(entries).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
            run(
                &mut |_, rng, out| {
                    let mut s = make_kinship_sample(&graph, &cfg.l2, rng).map_err(kin_outcome)?;
                    sources.localize(&mut s, out).map_err(Outcome::Fatal)?;
                    Ok(s)
                },
                &mut out,
            )?;
        }
        Level::L2Arith => {
            run(
                &mut |_, rng, out| {
                    let g = make_arith_sample(&cfg.l2, rng).map_err(scene_outcome)?;
                    for a in &g.assets {
                        out.write(&a.path, &a.png).map_err(Outcome::Fatal)?;
                    }
                    Ok(g.sample)
                },
                &mut out,
            )?;
        }
        Level::L3 => {
            let path = required(&cfg.inputs.concept_index, "concept_index")?;
            input_files.push(path.to_path_buf());
            let root = parent_dir(path);
            let index = load_concept_index(path)?;
            for e in index.entries() {
                sources.register(&root, &ImageRef::new(e.path))?;
            }
            let inner = make_provider(cfg, &root)?;
            let mut provider = CachedProvider::new(inner, cfg.caption_cache_dir()).map_err(provider_error)?;
            run(
                &mut |_, rng, out| {
                    let mut s = make_l3_sample(&index, &mut provider, &cfg.l3, rng).map_err(l3_outcome)?;
                    sources.localize(&mut s, out).map_err(Outcome::Fatal)?;
                    Ok(s)
                },
                &mut out,
            )?;
            provider_stats = Some(ProviderStats {
                id: provider.id().to_string(),
                cache_hits: provider.hits(),
                cache_misses: provider.misses(),
                cache_hit_rate: provider.hit_rate(),
            });
        }
    }

    for s in &samples {
        s.validate().map_err(|e| PipelineError::Input(e.to_string()))?;
    }
    let mut data = Vec::new();
    write_jsonl(&samples, &mut data)?;
    out.write("data.jsonl", &data)?;
    let stats = GenStats {
        level,
        count: samples.len(),
        attempts,
        level_mix: BTreeMap::from([(level.as_str().to_string(), samples.len())]),
        mean_images_per_sample: mean_images(&samples),
        drop_reasons: drops,
        provider: provider_stats,
    };
    // Cache counters legitimately differ between a cold and warm rerun, so
    // stats.json stays out of the manifest digest list.
    let mut stats_bytes = serde_json::to_vec_pretty(&stats).expect("serializable");
    stats_bytes.push(b'\n');
    fs::write(dir.join("stats.json"), stats_bytes).map_err(io_err(&dir))?;
    let inputs = input_digests(cfg, &input_files.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    out.finish("manifest.json", &format!("gen {}", level.slug()), cfg, inputs)?;
    info!("{}: wrote {} samples to {}", level.as_str(), samples.len(), dir.display());
    Ok(stats)
}

fn mean_images(samples: &[PreferenceSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s.images.len()).sum::<usize>() as f64 / samples.len() as f64
}

// ---------------------------------------------------------------- stats

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub level_mix: BTreeMap<String, usize>,
    pub mean_images_per_sample: f64,
    pub mean_prompt_tokens: f64,
    pub mean_chosen_tokens: f64,
    pub mean_rejected_tokens: f64,
}

pub fn dataset_stats(samples: &[PreferenceSample]) -> DatasetStats {
    let mut level_mix = BTreeMap::new();
    for s in samples {
        *level_mix.entry(s.level.as_str().to_string()).or_default() += 1;
    }
    let n = samples.len().max(1) as f64;
    let mean_tokens = |f: fn(&PreferenceSample) -> &str| samples.iter().map(|s| crate::filter::tokenize(f(s)).len()).sum::<usize>() as f64 / n;
    DatasetStats {
        count: samples.len(),
        level_mix,
        mean_images_per_sample: mean_images(samples),
        mean_prompt_tokens: mean_tokens(|s| &s.prompt),
        mean_chosen_tokens: mean_tokens(|s| &s.chosen),
        mean_rejected_tokens: mean_tokens(|s| &s.rejected),
    }
}

pub fn cmd_stats(dataset: &Path) -> Result<DatasetStats, PipelineError> {
    Ok(dataset_stats(&read_jsonl(open(dataset)?)?))
}

// ---------------------------------------------------------------- filter

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub embedder: String,
    pub scope: FilterScope,
    pub total: usize,
    pub kept: usize,
    pub dropped: usize,
    pub flagged: usize,
    pub second_pass: bool,
    pub reports: Vec<FilterReport>,
}

pub fn make_embedder(spec: &str) -> Result<Box<dyn Embedder>, PipelineError> {
    if spec == "mock" {
        return Ok(Box::new(MockEmbedder));
    }
    let emb = HttpEmbedder::connect(spec).map_err(|e| PipelineError::External(e.to_string()))?;
    check_conformance(&emb).map_err(|e| PipelineError::External(format!("sidecar conformance: {e}")))?;
    Ok(Box::new(emb))
}

fn sibling(input: &Path, suffix: &str) -> (PathBuf, String) {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    (parent_dir(input), format!("{stem}.{suffix}"))
}

/// Filter one dataset file; outputs land next to it as
/// `<stem>.filtered.jsonl`, `<stem>.filter_report.json` and
/// `<stem>.filter_manifest.json`.
pub fn cmd_filter(cfg: &RunConfig, input: &Path) -> Result<FilterSummary, PipelineError> {
    cfg.validate()?;
    let samples = read_jsonl(open(input)?)?;
    let embedder = make_embedder(&cfg.filter.embedder)?;
    let second_pass = samples.iter().any(|s| s.meta.contains_key("similarity"));
    if second_pass {
        warn!(
            "{} was already filtered; a new threshold is computed over the kept pairs, so this pass drops about a quarter again",
            input.display()
        );
    }
    let reports = filter_scoped(&samples, embedder.as_ref(), cfg.filter.scope)?;
    let scores: BTreeMap<&str, Option<f64>> = reports.iter().flat_map(|r| r.scores.iter().map(|s| (s.id.as_str(), s.score))).collect();
    let kept: Vec<PreferenceSample> = samples
        .iter()
        .filter(|s| reports.iter().any(|r| r.kept.contains(&s.id)))
        .map(|s| {
            let mut s = s.clone();
            s.meta.insert("embedder".into(), embedder.id().to_string());
            if let Some(Some(v)) = scores.get(s.id.as_str()) {
                s.meta.insert("similarity".into(), format!("{v}"));
            }
            s
        })
        .collect();
    let summary = FilterSummary {
        embedder: embedder.id().to_string(),
        scope: cfg.filter.scope,
        total: samples.len(),
        kept: kept.len(),
        dropped: reports.iter().map(|r| r.dropped.len()).sum(),
        flagged: reports.iter().map(|r| r.flagged.len()).sum(),
        second_pass,
        reports,
    };
    let (dir, data_name) = sibling(input, "filtered.jsonl");
    let (_, report_name) = sibling(input, "filter_report.json");
    let (_, manifest_name) = sibling(input, "filter_manifest.json");
    let mut out = Outputs::new(&dir)?;
    let mut data = Vec::new();
    write_jsonl(&kept, &mut data)?;
    out.write(&data_name, &data)?;
    out.write_json(&report_name, &summary)?;
    out.finish(&manifest_name, "filter", cfg, input_digests(cfg, &[input])?)?;
    info!(
        "filter {}: kept {} of {} ({} flagged)",
        input.display(),
        summary.kept,
        summary.total,
        summary.flagged
    );
    Ok(summary)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub featurizer: Featurizer,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub name: String,
    pub label: String,
    pub objective: Objective,
    pub steps: usize,
    pub reports: Vec<TrainReport>,
}

/// Dataset file for one level, preferring the filtered one.
pub fn dataset_path(cfg: &RunConfig, level: Level) -> Option<PathBuf> {
    let dir = cfg.out_dir.join(level.slug());
    let filtered = dir.join("data.filtered.jsonl");
    if cfg.train.use_filtered && filtered.exists() {
        return Some(filtered);
    }
    let raw = dir.join("data.jsonl");
    raw.exists().then_some(raw)
}

/// Directory-safe name for a schedule run.
pub fn run_name(plan: &SchedulePlan, objective: Objective) -> String {
    let mut s = String::new();
    for c in plan.canonical_label().chars() {
        match c {
            'L' => s.push('l'),
            c if c.is_ascii_alphanumeric() => s.push(c),
            '→' => s.push_str("-then-"),
            '∪' => s.push_str("-u-"),
            ' ' => s.push('-'),
            _ => {}
        }
    }
    format!("{s}__{objective}")
}

/// Parse every configured schedule before doing any work.
pub fn parse_schedules(cfg: &RunConfig) -> Result<Vec<SchedulePlan>, PipelineError> {
    cfg.train.schedules.iter().map(|l| build_schedule(l).map_err(PipelineError::from)).collect()
}

type LevelData = BTreeMap<TaskLevel, Vec<PreferenceExample>>;

fn load_examples(cfg: &RunConfig, levels: &[TaskLevel]) -> Result<(LevelData, Vec<PathBuf>), PipelineError> {
    let featurizer = cfg.train.featurizer();
    let base = Rng::new(cfg.seed).substream("examples", 0);
    let mut data = BTreeMap::new();
    let mut files = Vec::new();
    for &tl in levels {
        let mut samples = Vec::new();
        let mut found = Vec::new();
        for &level in tl.members() {
            if let Some(path) = dataset_path(cfg, level) {
                samples.extend(read_jsonl(open(&path)?)?);
                found.push(path.display().to_string());
                files.push(path);
            }
        }
        if found.is_empty() {
            return Err(PipelineError::Input(format!(
                "no dataset for {} under {}; run gen first",
                tl.as_str(),
                cfg.out_dir.display()
            )));
        }
        if samples.is_empty() {
            return Err(PipelineError::Input(format!("{} has no samples ({})", tl.as_str(), found.join(", "))));
        }
        let rng = base.substream(tl.as_str(), 0);
        data.insert(tl, build_examples(&samples, &featurizer, cfg.train.alternates, &rng));
    }
    Ok((data, files))
}

fn default_budget(cfg: &RunConfig, data: &LevelData) -> usize {
    let n: usize = data.values().map(Vec::len).sum();
    cfg.train.epochs * n.div_ceil(cfg.train.batch_size)
}

/// Probes, when a concept index is configured.
pub fn build_probes(cfg: &RunConfig) -> Result<Option<(Vec<EvalItem>, PathBuf)>, PipelineError> {
    let Some(path) = &cfg.inputs.concept_index else {
        return Ok(None);
    };
    let index = load_concept_index(path)?;
    let base = Rng::new(cfg.seed);
    let items = (0..cfg.eval.probes)
        .map(|i| {
            let mut rng = base.substream("probe", i as u64);
            make_l3_probe(&index, &cfg.l3, &mut rng).map_err(|e| match l3_outcome(e) {
                Outcome::Fatal(f) => f,
                Outcome::Drop(r) => PipelineError::Input(r.into()),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Some((items, path.clone())))
}

/// Candidate features for a probe: option k reads "Image k shows a <concept>"
/// using the concept label attached to that image.
pub fn probe_choice(item: &EvalItem, featurizer: &Featurizer) -> Choice {
    let ctx = PreferenceSample {
        id: item.id.clone(),
        level: Level::L3,
        images: item.images.clone(),
        prompt: item.question.clone(),
        chosen: String::new(),
        rejected: String::new(),
        meta: BTreeMap::new(),
    };
    let features = item
        .options
        .iter()
        .enumerate()
        .map(|(k, opt)| {
            let concept = item.images.get(k).and_then(|im| im.concept.as_ref()).map(|c| c.as_str()).unwrap_or("");
            featurizer.features(&ctx, &format!("{opt} shows a {concept}"))
        })
        .collect();
    Choice { features }
}

pub fn policy_probe_score(items: &[EvalItem], policy: &PolicyFile) -> Result<EvalScore, PipelineError> {
    let p = LogLinearPolicy {
        weights: policy.weights.clone(),
    };
    score_mc(items, |it| p.argmax(&probe_choice(it, &policy.featurizer))).map_err(|e| PipelineError::Input(e.to_string()))
}

/// Run every configured schedule under the same budget.
pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainRun>, PipelineError> {
    cfg.validate()?;
    let plans = parse_schedules(cfg)?;
    let mut levels: Vec<TaskLevel> = plans.iter().flat_map(SchedulePlan::levels).collect();
    levels.sort();
    levels.dedup();
    let (data, files) = load_examples(cfg, &levels)?;
    let budget = cfg.train.steps.unwrap_or_else(|| default_budget(cfg, &data));
    let probes = build_probes(cfg)?;
    let tcfg = cfg.train.train_config();
    let featurizer = cfg.train.featurizer();
    let root = cfg.out_dir.join("train");
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    let mut inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    if let Some((_, p)) = &probes {
        inputs.push(p);
    }
    let inputs = input_digests(cfg, &inputs)?;
    for plan in plans {
        let plan = plan.with_budget(budget)?;
        let name = run_name(&plan, tcfg.objective);
        let mut policy = LogLinearPolicy::zeros(featurizer.dim());
        let reports = run_schedule(&plan, &data, &mut policy, &tcfg, &mut Rng::new(cfg.seed).substream("train", 0))?;
        let file = PolicyFile {
            featurizer,
            weights: policy.weights,
        };
        let mut metrics = BTreeMap::new();
        if let Some((items, _)) = &probes {
            metrics.insert("probe_accuracy".to_string(), policy_probe_score(items, &file)?.accuracy());
        }
        let run = TrainRun {
            name: name.clone(),
            label: plan.canonical_label(),
            objective: tcfg.objective,
            steps: plan.total_steps(),
            reports,
        };
        let mut out = Outputs::new(&root.join(&name))?;
        out.write_json("policy.json", &file)?;
        out.write_json("reports.json", &run)?;
        out.write("loss.csv", stage_csv(&run.reports, TrainReport::loss_csv).as_bytes())?;
        out.write("epochs.csv", stage_csv(&run.reports, TrainReport::epochs_csv).as_bytes())?;
        out.finish("manifest.json", &format!("train {}", run.label), cfg, inputs.clone())?;
        rows.push(ComparisonRow::from_reports(&run.label, &run.reports, metrics));
        info!("train {}: {} steps", run.label, run.steps);
        runs.push(run);
    }
    let mut out = Outputs::new(&root)?;
    out.write(&format!("comparison_{}.md", tcfg.objective), comparison_markdown(&rows).as_bytes())?;
    out.write(&format!("comparison_{}.csv", tcfg.objective), comparison_csv(&rows).as_bytes())?;
    Ok(runs)
}

/// Per-stage CSVs joined with a leading `stage` column.
fn stage_csv(reports: &[TrainReport], f: fn(&TrainReport) -> String) -> String {
    let mut out = String::new();
    for (i, r) in reports.iter().enumerate() {
        let csv = f(r);
        let mut lines = csv.lines();
        let header = lines.next().unwrap_or_default();
        if i == 0 {
            out.push_str(&format!("stage,{header}\n"));
        }
        for l in lines {
            out.push_str(&format!("{},{l}\n", i + 1));
        }
    }
    out
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub chooser: String,
    pub score: EvalScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub probes: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalSummary {
    pub fn markdown(&self) -> String {
        let mut s = format!("# Probe evaluation\n\n{} multiple-choice probes.\n\n| chooser | accuracy | out of range |\n|---|---|---|\n", self.probes);
        for r in &self.rows {
            s.push_str(&format!("| {} | {:.4} | {} |\n", r.chooser, r.score.accuracy(), r.score.out_of_range.len()));
        }
        s
    }
}

/// Score the answer-key oracle and every trained policy under
/// `<out_dir>/train/` on freshly built probes.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary, PipelineError> {
    cfg.validate()?;
    let (items, index_path) = build_probes(cfg)?.ok_or_else(|| PipelineError::Input("missing input: inputs.concept_index is not set".into()))?;
    let mut rows = vec![EvalRow {
        chooser: "oracle".into(),
        score: score_mc(&items, |it| it.answer_key).map_err(|e| PipelineError::Input(e.to_string()))?,
    }];
    let train_root = cfg.out_dir.join("train");
    let mut runs: Vec<PathBuf> = match fs::read_dir(&train_root) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("policy.json").is_file())
            .collect(),
        Err(_) => Vec::new(),
    };
    runs.sort();
    let mut inputs = vec![index_path];
    for run in &runs {
        let path = run.join("policy.json");
        let file: PolicyFile = serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?)
            .map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
        if file.weights.len() != file.featurizer.dim() {
            return Err(PipelineError::Input(format!("{}: weight length does not match featurizer", path.display())));
        }
        rows.push(EvalRow {
            chooser: run.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
            score: policy_probe_score(&items, &file)?,
        });
        inputs.push(path);
    }
    let summary = EvalSummary { probes: items.len(), rows };
    let mut out = Outputs::new(&cfg.out_dir.join("eval"))?;
    let mut probes = Vec::new();
    write_records(&items, &mut probes)?;
    out.write("probes.jsonl", &probes)?;
    out.write_json("eval.json", &summary)?;
    out.write("summary.md", summary.markdown().as_bytes())?;
    let inputs = input_digests(cfg, &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    out.finish("manifest.json", "eval", cfg, inputs)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_sections() {
        let c = RunConfig::from_toml("seed = 9\n[counts]\nl1 = 5\n[train]\nobjective = \"sft\"\n[filter]\nscope = { per_batch = 64 }\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.counts.l1, 5);
        assert_eq!(c.counts.l3, 20_000);
        assert_eq!(c.train.objective, Objective::Sft);
        assert_eq!(c.filter.scope, FilterScope::PerBatch(64));
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back.digest(), c.digest());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn digest_ignores_out_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn run_names() {
        let p = build_schedule("L1→(L2∪L3)").unwrap();
        assert_eq!(run_name(&p, Objective::Dpo), "l1-then-l2-u-l3__dpo");
        let p = build_schedule("L2 flat").unwrap();
        assert_eq!(run_name(&p, Objective::Sft), "l2-flat__sft");
    }

    #[test]
    fn unsafe_image_paths_are_rejected() {
        let mut s = ImageSources::default();
        assert!(s.register(Path::new("in"), &ImageRef::new("../x.png")).is_err());
        assert!(s.register(Path::new("in"), &ImageRef::new("/abs.png")).is_err());
        s.register(Path::new("in"), &ImageRef::new("a/x.png")).unwrap();
        assert!(s.register(Path::new("other"), &ImageRef::new("a/x.png")).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config(String::new()).exit_code(), 1);
        assert_eq!(PipelineError::Input(String::new()).exit_code(), 2);
        assert_eq!(PipelineError::External(String::new()).exit_code(), 3);
    }
}
