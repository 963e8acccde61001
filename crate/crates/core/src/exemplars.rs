//! Exemplar store for dynamic one-shot prompting.
//!
//! The store holds training statements the model answered correctly under
//! zero-shot CoT, together with the reasoning that led there. A query picks
//! the closest exemplar by squared L2 distance inside the best non-empty tier:
//!
//! | tier | same type | same section |
//! |------|-----------|--------------|
//! | 1    | yes       | yes          |
//! | 2    | no        | yes          |
//! | 3    | yes       | no           |
//! | 4    | no        | no           |
//!
//! Tiers 2 and 3 swap under [`TierPriority::TypeFirst`]. Remaining ties go to
//! the lexicographically smallest sample id.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Label, Sample, SampleType, SectionId};
use crate::fsutil::write_atomic;
use crate::strategies::{Harness, StrategyError};

#[derive(Debug, Error)]
pub enum ExemplarError {
    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("embedding must be non-empty with finite values")]
    InvalidEmbedding,
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("no exemplar qualifies")]
    EmptyStore,
    #[error("duplicate exemplar id {0}")]
    DuplicateId(String),
    #[error("exemplar {0} has empty reasoning")]
    EmptyReasoning(String),
    #[error("training sample {0} has no gold label")]
    MissingGold(String),
    #[error("store file {path}: {reason}")]
    StoreFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = ExemplarError;
    fn try_from(values: Vec<f64>) -> Result<Self, ExemplarError> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, ExemplarError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(ExemplarError::InvalidEmbedding);
        }
        Ok(Embedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Sum of squared component differences.
pub fn squared_l2(a: &Embedding, b: &Embedding) -> Result<f64, ExemplarError> {
    if a.dim() != b.dim() {
        return Err(ExemplarError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Embedding, ExemplarError>;
    /// Short description recorded in run manifests.
    fn describe(&self) -> String;
}

/// Deterministic offline provider: the SHA-256 of (seed, text) seeds a
/// ChaCha8 stream of uniform values in [-1, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbedder { dim, seed }
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, ExemplarError> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        Embedding::new((0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn describe(&self) -> String {
        format!("hash(dim={}, seed={})", self.dim, self.seed)
    }
}

/// OpenAI-compatible `POST {base}/embeddings` provider.
pub struct HttpEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
    http: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        dim: usize,
    ) -> Result<Self, ExemplarError> {
        let base = base_url.trim_end_matches('/');
        let url = if base.ends_with("/embeddings") {
            base.to_string()
        } else {
            format!("{base}/embeddings")
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| ExemplarError::ProviderUnavailable(e.to_string()))?;
        Ok(HttpEmbedder {
            url,
            model: model.to_string(),
            api_key,
            dim,
            http,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, ExemplarError> {
        let unavailable = |e: String| ExemplarError::ProviderUnavailable(e);
        let mut call = self
            .http
            .post(&self.url)
            .json(&serde_json::json!({ "model": self.model, "input": text }));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| unavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(unavailable(format!("HTTP {status}")));
        }
        let reply: EmbeddingReply = resp.json().map_err(|e| unavailable(e.to_string()))?;
        let values = reply
            .data
            .into_iter()
            .next()
            .ok_or_else(|| unavailable("empty embedding response".into()))?
            .embedding;
        if values.len() != self.dim {
            return Err(ExemplarError::DimMismatch {
                left: values.len(),
                right: self.dim,
            });
        }
        Embedding::new(values)
    }

    fn describe(&self) -> String {
        format!("http({}, model={}, dim={})", self.url, self.model, self.dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exemplar {
    pub sample_id: String,
    pub statement: String,
    pub embedding: Embedding,
    pub reasoning: String,
    pub label: Label,
    #[serde(rename = "type")]
    pub kind: SampleType,
    pub section: SectionId,
}

/// Immutable, validated set of exemplars sharing one embedding dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarStore {
    exemplars: Vec<Exemplar>,
    dim: usize,
}

impl ExemplarStore {
    pub fn new(exemplars: Vec<Exemplar>) -> Result<Self, ExemplarError> {
        let dim = exemplars
            .first()
            .ok_or(ExemplarError::EmptyStore)?
            .embedding
            .dim();
        let mut ids = BTreeSet::new();
        for ex in &exemplars {
            if ex.embedding.dim() != dim {
                return Err(ExemplarError::DimMismatch {
                    left: ex.embedding.dim(),
                    right: dim,
                });
            }
            if ex.reasoning.trim().is_empty() {
                return Err(ExemplarError::EmptyReasoning(ex.sample_id.clone()));
            }
            if !ids.insert(ex.sample_id.as_str()) {
                return Err(ExemplarError::DuplicateId(ex.sample_id.clone()));
            }
        }
        Ok(ExemplarStore { exemplars, dim })
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    /// One JSON record per line, written atomically.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for ex in &self.exemplars {
            out.push_str(&serde_json::to_string(ex).expect("exemplar serializes"));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, ExemplarError> {
        let bad = |reason: String| ExemplarError::StoreFile {
            path: path.to_path_buf(),
            reason,
        };
        let file = fs::File::open(path).map_err(|e| bad(e.to_string()))?;
        let mut exemplars = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Exemplar =
                serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
            exemplars.push(ex);
        }
        ExemplarStore::new(exemplars)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TierPriority {
    /// Same section outranks same type.
    #[default]
    SectionFirst,
    TypeFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionOptions {
    pub priority: TierPriority,
    /// Skip exemplars whose statement equals the query statement.
    pub exclude_identical_statement: bool,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        SelectionOptions {
            priority: TierPriority::SectionFirst,
            exclude_identical_statement: true,
        }
    }
}

/// Tier 1 (best) to 4 of `ex` relative to `query`.
pub fn tier(query: &Sample, ex: &Exemplar, priority: TierPriority) -> u8 {
    let same_type = query.kind == ex.kind;
    let same_section = query.section == ex.section;
    match (same_type, same_section, priority) {
        (true, true, _) => 1,
        (false, true, TierPriority::SectionFirst) | (true, false, TierPriority::TypeFirst) => 2,
        (true, false, TierPriority::SectionFirst) | (false, true, TierPriority::TypeFirst) => 3,
        (false, false, _) => 4,
    }
}

/// Minimum of (tier, distance, sample id) over the eligible exemplars.
pub fn select_exemplar<'s>(
    query: &Sample,
    query_emb: &Embedding,
    store: &'s ExemplarStore,
    opts: SelectionOptions,
) -> Result<&'s Exemplar, ExemplarError> {
    if query_emb.dim() != store.dim() {
        return Err(ExemplarError::DimMismatch {
            left: query_emb.dim(),
            right: store.dim(),
        });
    }
    let mut best: Option<(u8, f64, &Exemplar)> = None;
    for ex in store.exemplars() {
        if opts.exclude_identical_statement && ex.statement == query.statement {
            continue;
        }
        let t = tier(query, ex, opts.priority);
        let d = squared_l2(query_emb, &ex.embedding)?;
        let better = match best {
            None => true,
            Some((bt, bd, bex)) => (t, d, ex.sample_id.as_str())
                .partial_cmp(&(bt, bd, bex.sample_id.as_str()))
                .is_some_and(|o| o.is_lt()),
        };
        if better {
            best = Some((t, d, ex));
        }
    }
    best.map(|(_, _, ex)| ex).ok_or(ExemplarError::EmptyStore)
}

/// Runs zero-shot CoT on every training sample and keeps the correctly
/// answered ones, with their reasoning, as exemplars.
pub fn build_store(
    train: &[&Sample],
    harness: &Harness<'_>,
    provider: &dyn EmbeddingProvider,
) -> Result<ExemplarStore, ExemplarError> {
    if let Some(s) = train.iter().find(|s| s.gold.is_none()) {
        return Err(ExemplarError::MissingGold(s.id.clone()));
    }
    let traces = harness.try_map(train, |s| harness.cot_trace(s))?;
    let mut exemplars = Vec::new();
    for (sample, trace) in train.iter().zip(traces) {
        if Some(trace.answer.label) != sample.gold || trace.reasoning.trim().is_empty() {
            continue;
        }
        exemplars.push(Exemplar {
            sample_id: sample.id.clone(),
            statement: sample.statement.clone(),
            embedding: provider.embed(&sample.statement)?,
            reasoning: trace.reasoning,
            label: trace.answer.label,
            kind: sample.kind,
            section: sample.section,
        });
    }
    exemplars.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    ExemplarStore::new(exemplars)
}
