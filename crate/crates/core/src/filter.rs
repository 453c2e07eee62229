//! Similarity filtering of chosen/rejected pairs. Pairs whose responses are
//! too alike (top quartile of cosine similarity) are dropped.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::PreferenceSample;

pub const MOCK_DIM: usize = 256;
pub const MIN_BATCH: usize = 4;
pub const QUANTILE: f64 = 0.75;
pub const QUANTILE_METHOD: &str = "linear interpolation between closest ranks, rank = 0.75 * (n - 1)";

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    /// Transport failure or service not ready. Never retried per sample.
    #[error("embedder unreachable: {0}")]
    Unreachable(String),
    #[error("embedder rejected the request: {0}")]
    Rejected(String),
    #[error("embedder protocol violation: {0}")]
    Protocol(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("batch of {0} pairs is too small for a quartile threshold (need at least {MIN_BATCH})")]
    BatchTooSmall(usize),
    #[error("vector dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub trait Embedder {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// One unit vector per text, in order.
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

/// Lowercase alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn mock_bucket(token: &str) -> usize {
    let d = Sha256::digest(token.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    (u64::from_le_bytes(b) % MOCK_DIM as u64) as usize
}

/// Hashed bag of words, L2-normalized. `None` when the text has no tokens.
pub fn mock_embed(text: &str) -> Option<Vec<f64>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return None;
    }
    let mut v = vec![0.0; MOCK_DIM];
    for t in &tokens {
        v[mock_bucket(t)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MockEmbedder;

impl Embedder for MockEmbedder {
    fn id(&self) -> &str {
        "mock-bow-256"
    }

    fn dim(&self) -> usize {
        MOCK_DIM
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        texts
            .iter()
            .map(|t| mock_embed(t).ok_or_else(|| EmbedError::Rejected(format!("no tokens in `{t}`"))))
            .collect()
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, FilterError> {
    if u.len() != v.len() {
        return Err(FilterError::DimMismatch(u.len(), v.len()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Linear-interpolated quantile of ascending `sorted`.
pub fn quantile_linear(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub id: String,
    /// `None` when the pair could not be scored.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub embedder: String,
    pub quantile_method: String,
    /// NaN (serialized as null) when no pair could be scored.
    pub tau: f64,
    pub scores: Vec<PairScore>,
    pub kept: BTreeSet<String>,
    pub dropped: BTreeSet<String>,
    /// Unscored pairs. Always dropped.
    pub flagged: BTreeSet<String>,
    /// Every scored pair had the same similarity, so everything was dropped.
    pub degenerate: bool,
    pub histogram: Vec<HistogramBin>,
}

impl FilterReport {
    pub fn dropped_fraction(&self) -> f64 {
        self.dropped.len() as f64 / self.scores.len() as f64
    }

    /// Partition and threshold invariants.
    pub fn check(&self) -> Result<(), String> {
        let all: BTreeSet<&String> = self.scores.iter().map(|s| &s.id).collect();
        if !self.kept.is_disjoint(&self.dropped) {
            return Err("kept and dropped overlap".into());
        }
        let union: BTreeSet<&String> = self.kept.iter().chain(&self.dropped).collect();
        if union != all {
            return Err("kept and dropped do not cover every id".into());
        }
        for s in &self.scores {
            let keep = self.kept.contains(&s.id);
            match s.score {
                None if keep => return Err(format!("unscored `{}` kept", s.id)),
                Some(x) if keep && !(x < self.tau) => return Err(format!("`{}` kept with {x} >= tau", s.id)),
                Some(x) if !keep && !(x >= self.tau) => return Err(format!("`{}` dropped with {x} < tau", s.id)),
                _ => {}
            }
        }
        Ok(())
    }
}

const HIST_BINS: usize = 20;

fn histogram(scores: &[f64]) -> Vec<HistogramBin> {
    let width = 2.0 / HIST_BINS as f64;
    let mut bins: Vec<HistogramBin> = (0..HIST_BINS)
        .map(|i| HistogramBin {
            lo: -1.0 + i as f64 * width,
            hi: -1.0 + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for s in scores {
        let i = (((s + 1.0) / width) as usize).min(HIST_BINS - 1);
        bins[i].count += 1;
    }
    bins
}

const EMBED_CHUNK: usize = 64;

fn score_pairs(pairs: &[PreferenceSample], emb: &dyn Embedder) -> Result<Vec<Option<f64>>, FilterError> {
    let mut out = vec![None; pairs.len()];
    let scorable: Vec<usize> = (0..pairs.len())
        .filter(|&i| !tokenize(&pairs[i].chosen).is_empty() && !tokenize(&pairs[i].rejected).is_empty())
        .collect();
    for chunk in scorable.chunks(EMBED_CHUNK) {
        let texts: Vec<&str> = chunk
            .iter()
            .flat_map(|&i| [pairs[i].chosen.as_str(), pairs[i].rejected.as_str()])
            .collect();
        match emb.embed(&texts) {
            Ok(vectors) => {
                for (k, &i) in chunk.iter().enumerate() {
                    out[i] = Some(cosine(&vectors[2 * k], &vectors[2 * k + 1])?);
                }
            }
            Err(EmbedError::Unreachable(m)) => return Err(EmbedError::Unreachable(m).into()),
            Err(e) => {
                log::warn!("batch embed failed ({e}); scoring pairs one by one");
                for &i in chunk {
                    match emb.embed(&[&pairs[i].chosen, &pairs[i].rejected]) {
                        Ok(v) => out[i] = Some(cosine(&v[0], &v[1])?),
                        Err(EmbedError::Unreachable(m)) => return Err(EmbedError::Unreachable(m).into()),
                        Err(e) => log::warn!("pair `{}` unscored: {e}", pairs[i].id),
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Score every pair, then drop those at or above the 75th percentile.
pub fn filter_batch(pairs: &[PreferenceSample], emb: &dyn Embedder) -> Result<FilterReport, FilterError> {
    if pairs.len() < MIN_BATCH {
        return Err(FilterError::BatchTooSmall(pairs.len()));
    }
    let raw = score_pairs(pairs, emb)?;
    let mut finite: Vec<f64> = raw.iter().flatten().copied().collect();
    finite.sort_by(f64::total_cmp);
    let tau = if finite.is_empty() { f64::NAN } else { quantile_linear(&finite, QUANTILE) };
    let degenerate = !finite.is_empty() && finite[0] == finite[finite.len() - 1];
    if degenerate {
        log::warn!("all {} scores equal {tau}; every pair is dropped", finite.len());
    }

    let mut report = FilterReport {
        embedder: emb.id().to_string(),
        quantile_method: QUANTILE_METHOD.into(),
        tau,
        scores: Vec::with_capacity(pairs.len()),
        kept: BTreeSet::new(),
        dropped: BTreeSet::new(),
        flagged: BTreeSet::new(),
        degenerate,
        histogram: histogram(&finite),
    };
    for (p, score) in pairs.iter().zip(raw) {
        match score {
            Some(s) if s < tau => report.kept.insert(p.id.clone()),
            Some(_) => report.dropped.insert(p.id.clone()),
            None => {
                report.flagged.insert(p.id.clone());
                report.dropped.insert(p.id.clone())
            }
        };
        report.scores.push(PairScore {
            id: p.id.clone(),
            score,
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterScope {
    /// One threshold over the whole dataset.
    #[default]
    Corpus,
    /// One threshold per consecutive batch of this size. A short tail
    /// batch is merged into the one before it.
    PerBatch(usize),
}

pub fn filter_scoped(pairs: &[PreferenceSample], emb: &dyn Embedder, scope: FilterScope) -> Result<Vec<FilterReport>, FilterError> {
    match scope {
        FilterScope::Corpus => Ok(vec![filter_batch(pairs, emb)?]),
        FilterScope::PerBatch(size) => {
            if size < MIN_BATCH {
                return Err(FilterError::BatchTooSmall(size));
            }
            let mut bounds: Vec<(usize, usize)> = (0..pairs.len()).step_by(size).map(|s| (s, (s + size).min(pairs.len()))).collect();
            if bounds.len() > 1 && bounds[bounds.len() - 1].1 - bounds[bounds.len() - 1].0 < MIN_BATCH {
                let (_, end) = bounds.pop().unwrap();
                bounds.last_mut().unwrap().1 = end;
            }
            bounds.into_iter().map(|(a, b)| filter_batch(&pairs[a..b], emb)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default)]
    pub model: Option<String>,
    pub dim: usize,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

pub const SIDECAR_NORM_TOL: f64 = 1e-5;

/// Client for the embedding sidecar (`POST /embed`, `GET /healthz`).
pub struct HttpEmbedder {
    base: String,
    id: String,
    dim: usize,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    /// Connects and runs the health preflight. Fails hard when the sidecar is
    /// down or not ready.
    pub fn connect(base_url: &str) -> Result<Self, EmbedError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .http_status_as_error(false)
            .build()
            .into();
        let base = base_url.trim_end_matches('/').to_string();
        let url = format!("{base}/healthz");
        let mut resp = agent.get(&url).call().map_err(|e| EmbedError::Unreachable(format!("{url}: {e}")))?;
        if resp.status() != 200 {
            return Err(EmbedError::Unreachable(format!("{url}: status {}", resp.status())));
        }
        let health: Health = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Protocol(format!("{url}: {e}")))?;
        if health.dim == 0 {
            return Err(EmbedError::Protocol("healthz reports dim 0".into()));
        }
        let id = format!("sidecar:{}", health.model.as_deref().unwrap_or("unknown"));
        Ok(Self {
            base,
            id,
            dim: health.dim,
            agent,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let url = format!("{}/embed", self.base);
        let mut resp = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json")
            .send_json(EmbedRequest { texts })
            .map_err(|e| EmbedError::Unreachable(format!("{url}: {e}")))?;
        match resp.status().as_u16() {
            200 => {}
            503 => return Err(EmbedError::Unreachable(format!("{url}: status 503"))),
            s => {
                let body = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(EmbedError::Rejected(format!("{url}: status {s}: {body}")));
            }
        }
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Protocol(format!("{url}: {e}")))?;
        validate_vectors(texts.len(), self.dim, body.dim, &body.vectors)?;
        Ok(body.vectors)
    }
}

fn validate_vectors(n: usize, expected_dim: usize, dim: usize, vectors: &[Vec<f64>]) -> Result<(), EmbedError> {
    if dim != expected_dim {
        return Err(EmbedError::Protocol(format!("dim {dim} differs from healthz dim {expected_dim}")));
    }
    if vectors.len() != n {
        return Err(EmbedError::Protocol(format!("{} vectors for {n} texts", vectors.len())));
    }
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(EmbedError::Protocol(format!("vector {i} has length {}", v.len())));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > SIDECAR_NORM_TOL {
            return Err(EmbedError::Protocol(format!("vector {i} has norm {norm}")));
        }
    }
    Ok(())
}

/// Request fixtures every embedder must handle identically.
pub const CONFORMANCE_TEXTS: [&str; 6] = [
    "hello",
    "hello",
    "A detailed photo of a peacock.",
    "The images show a canoe, a lemon, and a kite.",
    "There are 5 circles in total.",
    "The result is -2.",
];

/// Shared protocol conformance check: order, dims, unit norms, identical
/// texts give identical vectors, and batch results equal single calls.
pub fn check_conformance(emb: &dyn Embedder) -> Result<(), String> {
    let vs = emb.embed(&CONFORMANCE_TEXTS).map_err(|e| e.to_string())?;
    validate_vectors(CONFORMANCE_TEXTS.len(), emb.dim(), emb.dim(), &vs).map_err(|e| e.to_string())?;
    let same = cosine(&vs[0], &vs[1]).map_err(|e| e.to_string())?;
    if (same - 1.0).abs() > 1e-9 {
        return Err(format!("identical texts gave cosine {same}"));
    }
    for (i, t) in CONFORMANCE_TEXTS.iter().enumerate() {
        let single = emb.embed(&[t]).map_err(|e| e.to_string())?;
        let c = cosine(&single[0], &vs[i]).map_err(|e| e.to_string())?;
        if (c - 1.0).abs() > 1e-6 {
            return Err(format!("text {i} embeds differently alone (cosine {c}); batch order not preserved?"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fake_http::{FakeServer, Reply};
    use crate::types::{ImageRef, Level};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn pair(id: &str, chosen: &str, rejected: &str) -> PreferenceSample {
        PreferenceSample {
            id: id.into(),
            level: Level::L3,
            images: vec![ImageRef::new("a.png")],
            prompt: "p".into(),
            chosen: chosen.into(),
            rejected: rejected.into(),
            meta: BTreeMap::new(),
        }
    }

    /// Embeds `"<score>"` texts so that cosine(chosen, rejected) equals the
    /// number written in the rejected text.
    struct ScoreEmbedder;
    impl Embedder for ScoreEmbedder {
        fn id(&self) -> &str {
            "score"
        }
        fn dim(&self) -> usize {
            2
        }
        fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
            Ok(texts
                .iter()
                .map(|t| {
                    if *t == "anchor" {
                        vec![1.0, 0.0]
                    } else {
                        let s: f64 = t.parse().unwrap();
                        vec![s, (1.0 - s * s).sqrt()]
                    }
                })
                .collect())
        }
    }

    fn scored(scores: &[f64]) -> Vec<PreferenceSample> {
        scores
            .iter()
            .enumerate()
            .map(|(i, s)| pair(&format!("p{i}"), "anchor", &s.to_string()))
            .collect()
    }

    #[test]
    fn cosine_basics() {
        let u = [0.6, 0.8];
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&u, &[-0.6, -0.8]).unwrap(), -1.0);
        assert_eq!(cosine(&u, &[1.0]).unwrap_err(), FilterError::DimMismatch(2, 1));
    }

    #[test]
    fn quartile_of_four() {
        let r = filter_batch(&scored(&[0.1, 0.2, 0.3, 0.4]), &ScoreEmbedder).unwrap();
        assert!((r.tau - 0.325).abs() < 1e-12);
        assert_eq!(r.dropped, BTreeSet::from(["p3".to_string()]));
        r.check().unwrap();
    }

    #[test]
    fn identical_scores_drop_everything() {
        let r = filter_batch(&scored(&[0.5; 6]), &ScoreEmbedder).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.dropped.len(), 6);
        r.check().unwrap();
    }

    #[test]
    fn batch_of_three_is_rejected() {
        assert_eq!(filter_batch(&scored(&[0.1, 0.2, 0.3]), &ScoreEmbedder).unwrap_err(), FilterError::BatchTooSmall(3));
    }

    #[test]
    fn empty_text_is_flagged_and_dropped() {
        let mut pairs = scored(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        pairs[0].rejected = "...".into();
        let r = filter_batch(&pairs, &MockEmbedder).unwrap();
        assert!(r.flagged.contains("p0") && r.dropped.contains("p0"));
        assert_eq!(r.scores[0].score, None);
        r.check().unwrap();
    }

    #[test]
    fn mock_embedding_properties() {
        assert!((cosine(&mock_embed("a b").unwrap(), &mock_embed("a b").unwrap()).unwrap() - 1.0).abs() < 1e-12);
        assert_ne!(mock_bucket("cat"), mock_bucket("dog"));
        assert_eq!(cosine(&mock_embed("cat").unwrap(), &mock_embed("dog").unwrap()).unwrap(), 0.0);
        assert!(mock_embed("").is_none());
        assert_eq!(tokenize("Tiger-Cat, 3!"), vec!["tiger", "cat", "3"]);
    }

    #[test]
    fn per_batch_scope_merges_short_tail() {
        let scores: Vec<f64> = (0..11).map(|i| i as f64 / 20.0).collect();
        let reports = filter_scoped(&scored(&scores), &ScoreEmbedder, FilterScope::PerBatch(4)).unwrap();
        assert_eq!(reports.iter().map(|r| r.scores.len()).collect::<Vec<_>>(), vec![4, 7]);
    }

    proptest! {
        #[test]
        fn quantile_matches_sort_and_interpolate(xs in prop::collection::vec(-1.0f64..1.0, 4..60)) {
            let r = filter_batch(&scored(&xs), &ScoreEmbedder).unwrap();
            // Oracle: explicit rank arithmetic over a fresh sort.
            let mut s = xs.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pos = 0.75 * (s.len() as f64 - 1.0);
            let below = s[pos as usize];
            let above = s[(pos as usize + 1).min(s.len() - 1)];
            let expect = below + (pos - pos.trunc()) * (above - below);
            prop_assert!((r.tau - expect).abs() < 1e-9);
            prop_assert!(r.check().is_ok());
            prop_assert!(r.scores.iter().all(|p| p.score.is_some()));
        }
    }

    fn sidecar_reply(req: &crate::fake_http::Request) -> Reply {
        match (req.method.as_str(), req.path.as_str()) {
            ("GET", "/healthz") => Reply::json(200, r#"{"status":"ok","model":"fake-bow","dim":256}"#),
            ("POST", "/embed") => {
                let body: serde_json::Value = serde_json::from_slice(&req.body).unwrap();
                let texts = body["texts"].as_array().unwrap();
                if texts.is_empty() {
                    return Reply::json(400, r#"{"error":"empty"}"#);
                }
                let vectors: Vec<Vec<f64>> = texts.iter().map(|t| mock_embed(t.as_str().unwrap()).unwrap()).collect();
                Reply::json(200, serde_json::json!({"dim": 256, "model": "fake-bow", "vectors": vectors}).to_string())
            }
            _ => Reply::json(404, "{}"),
        }
    }

    #[test]
    fn conformance_holds_for_mock_and_sidecar() {
        check_conformance(&MockEmbedder).unwrap();
        let server = FakeServer::start(sidecar_reply);
        let emb = HttpEmbedder::connect(&server.url).unwrap();
        assert_eq!(emb.dim(), 256);
        assert_eq!(emb.id(), "sidecar:fake-bow");
        check_conformance(&emb).unwrap();
        // Same scores through either embedder.
        let pairs = scored(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        let pairs: Vec<_> = pairs.into_iter().map(|mut p| {
            p.rejected = format!("anchor plus {}", p.rejected);
            p
        }).collect();
        let a = filter_batch(&pairs, &MockEmbedder).unwrap();
        let b = filter_batch(&pairs, &emb).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn unreachable_sidecar_is_a_hard_error() {
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let err = HttpEmbedder::connect(&format!("http://127.0.0.1:{port}")).err().unwrap();
        assert!(matches!(err, EmbedError::Unreachable(_)));
        let warming = FakeServer::start(|_| Reply::json(503, r#"{"status":"loading"}"#));
        assert!(matches!(HttpEmbedder::connect(&warming.url), Err(EmbedError::Unreachable(_))));
    }

    #[test]
    fn sidecar_norm_violation_is_detected() {
        let server = FakeServer::start(|req| match req.path.as_str() {
            "/healthz" => Reply::json(200, r#"{"status":"ok","dim":2}"#),
            _ => Reply::json(200, r#"{"dim":2,"vectors":[[1.0,1.0]]}"#),
        });
        let emb = HttpEmbedder::connect(&server.url).unwrap();
        assert!(matches!(emb.embed(&["x"]), Err(EmbedError::Protocol(_))));
    }
}
