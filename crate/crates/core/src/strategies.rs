//! End-to-end prediction strategies.
//!
//! [`Harness`] bundles the client, prompt builder and trial index, and fans
//! per-sample work out over a bounded worker pool. Output order is always the
//! id-sorted input order. A failure on one sample is recorded on that sample's
//! [`Prediction`] as a contradiction fallback and the run carries on.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::answer::{parse_label_with, ParseOptions, ParseStatus, ParsedAnswer};
use crate::corpus::{CorpusError, Label, Renderer, Sample, TrialIndex};
use crate::exemplars::{
    select_exemplar, EmbeddingProvider, ExemplarError, ExemplarStore, SelectionOptions,
};
use crate::fsutil::write_atomic;
use crate::llm::{CacheKey, LlmClient, LlmError};
use crate::metrics::Labels;
use crate::opro::InstructionPool;
use crate::prompts::{PromptBuilder, PromptError};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Exemplar(Box<ExemplarError>),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("run cancelled")]
    Cancelled,
}

impl From<ExemplarError> for StrategyError {
    fn from(e: ExemplarError) -> Self {
        StrategyError::Exemplar(Box::new(e))
    }
}

impl StrategyError {
    fn is_endpoint_failure(&self) -> bool {
        match self {
            StrategyError::Llm(e) => e.is_endpoint_failure(),
            StrategyError::Exemplar(e) => matches!(**e, ExemplarError::ProviderUnavailable(_)),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "zeroshot-cot")]
    ZeroShotCot,
    #[serde(rename = "oneshot")]
    DynamicOneShot,
    #[serde(rename = "opro")]
    Opro,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::ZeroShotCot => "zeroshot-cot",
            Strategy::DynamicOneShot => "oneshot",
            Strategy::Opro => "opro",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "zeroshot-cot" => Ok(Strategy::ZeroShotCot),
            "oneshot" => Ok(Strategy::DynamicOneShot),
            "opro" => Ok(Strategy::Opro),
            other => Err(format!(
                "unknown strategy {other:?} (expected zeroshot-cot, oneshot or opro)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    /// The model or embedding endpoint could not be used.
    pub endpoint: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub label: Label,
    pub status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning: Option<String>,
    /// Set exactly for dynamic one-shot predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exemplar_id: Option<String>,
    pub prompt_hashes: Vec<CacheKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
}

impl Prediction {
    fn failed(sample_id: &str, err: &StrategyError) -> Prediction {
        Prediction {
            sample_id: sample_id.to_string(),
            label: ParsedAnswer::FALLBACK.label,
            status: ParsedAnswer::FALLBACK.status,
            reasoning: None,
            exemplar_id: None,
            prompt_hashes: Vec::new(),
            failure: Some(Failure {
                endpoint: err.is_endpoint_failure(),
                message: err.to_string(),
            }),
        }
    }
}

/// Both calls of a zero-shot CoT pass over one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CotTrace {
    pub reasoning: String,
    pub raw_answer: String,
    pub answer: ParsedAnswer,
    pub hashes: Vec<CacheKey>,
}

/// A single-call answer.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTrace {
    pub raw: String,
    pub answer: ParsedAnswer,
    pub hash: CacheKey,
}

type CheckpointFn<'a> = dyn Fn(&[Prediction]) + Sync + 'a;

pub struct Harness<'a> {
    pub llm: &'a LlmClient,
    pub prompts: &'a PromptBuilder,
    pub trials: &'a TrialIndex,
    pub renderer: Renderer,
    pub parse: ParseOptions,
    /// Worker-pool width; 1 runs strictly sequentially.
    pub workers: usize,
    pub checkpoint_every: usize,
    checkpoint: Option<&'a CheckpointFn<'a>>,
    cancel: Option<Arc<AtomicBool>>,
}

impl<'a> Harness<'a> {
    pub fn new(llm: &'a LlmClient, prompts: &'a PromptBuilder, trials: &'a TrialIndex) -> Self {
        Harness {
            llm,
            prompts,
            trials,
            renderer: Renderer::default(),
            parse: ParseOptions::default(),
            workers: 4,
            checkpoint_every: 25,
            checkpoint: None,
            cancel: None,
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn with_renderer(mut self, renderer: Renderer) -> Self {
        self.renderer = renderer;
        self
    }

    pub fn with_parse_options(mut self, parse: ParseOptions) -> Self {
        self.parse = parse;
        self
    }

    /// `f` receives every prediction completed so far, every `every` samples.
    pub fn with_checkpoint(mut self, every: usize, f: &'a CheckpointFn<'a>) -> Self {
        self.checkpoint_every = every.max(1);
        self.checkpoint = Some(f);
        self
    }

    pub fn with_cancel(mut self, flag: Arc<AtomicBool>) -> Self {
        self.cancel = Some(flag);
        self
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancel
            .as_ref()
            .is_some_and(|c| c.load(Ordering::SeqCst))
    }

    pub fn evidence(&self, sample: &Sample) -> Result<String, StrategyError> {
        Ok(self.renderer.render_evidence(sample, self.trials)?)
    }

    fn parse(&self, raw: &str) -> ParsedAnswer {
        parse_label_with(raw, self.parse)
    }

    /// Reasoning call, then formatting call. Empty reasoning skips the
    /// second call and falls back.
    pub fn cot_trace(&self, sample: &Sample) -> Result<CotTrace, StrategyError> {
        let evidence = self.evidence(sample)?;
        let reasoning_req = self.prompts.build_cot_reasoning(sample, &evidence);
        let reasoning = self.llm.complete(&reasoning_req)?;
        let mut hashes = vec![reasoning.key];
        let format_req = match self.prompts.build_formatting(sample, &reasoning.content) {
            Ok(r) => r,
            Err(PromptError::EmptyReasoning) => {
                return Ok(CotTrace {
                    reasoning: reasoning.content,
                    raw_answer: String::new(),
                    answer: ParsedAnswer::FALLBACK,
                    hashes,
                })
            }
            Err(e) => return Err(e.into()),
        };
        let formatted = self.llm.complete(&format_req)?;
        hashes.push(formatted.key);
        Ok(CotTrace {
            answer: self.parse(&formatted.content),
            reasoning: reasoning.content,
            raw_answer: formatted.content,
            hashes,
        })
    }

    pub fn instruction_answer(
        &self,
        instruction: &str,
        sample: &Sample,
    ) -> Result<AnswerTrace, StrategyError> {
        let evidence = self.evidence(sample)?;
        let req = self
            .prompts
            .build_opro_predict(instruction, sample, &evidence);
        let resp = self.llm.complete(&req)?;
        Ok(AnswerTrace {
            answer: self.parse(&resp.content),
            raw: resp.content,
            hash: resp.key,
        })
    }

    pub fn oneshot_answer(
        &self,
        sample: &Sample,
        store: &ExemplarStore,
        provider: &dyn EmbeddingProvider,
        selection: SelectionOptions,
    ) -> Result<(AnswerTrace, String), StrategyError> {
        let query = provider.embed(&sample.statement)?;
        let exemplar = select_exemplar(sample, &query, store, selection)?;
        let evidence = self.evidence(sample)?;
        let req = self.prompts.build_oneshot(sample, &evidence, exemplar);
        let resp = self.llm.complete(&req)?;
        Ok((
            AnswerTrace {
                answer: self.parse(&resp.content),
                raw: resp.content,
                hash: resp.key,
            },
            exemplar.sample_id.clone(),
        ))
    }

    fn pool(&self) -> Option<rayon::ThreadPool> {
        (self.workers > 1).then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.workers)
                .build()
                .expect("worker pool")
        })
    }

    /// Applies `f` to every item, failing on the first error. Results keep input order.
    pub fn try_map<T, R, F>(&self, items: &[T], f: F) -> Result<Vec<R>, StrategyError>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> Result<R, StrategyError> + Sync,
    {
        let guarded = |item: &T| {
            if self.is_cancelled() {
                return Err(StrategyError::Cancelled);
            }
            f(item)
        };
        match self.pool() {
            None => items.iter().map(guarded).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(guarded).collect()),
        }
    }

    /// Per-sample runner with failure isolation, checkpoints and cancellation.
    /// Output is id-sorted; if cancelled it holds only the finished samples.
    fn predict_each<F>(&self, samples: &[&Sample], f: F) -> Vec<Prediction>
    where
        F: Fn(&Sample) -> Result<Prediction, StrategyError> + Sync,
    {
        let mut ordered: Vec<&Sample> = samples.to_vec();
        ordered.sort_by(|a, b| a.id.cmp(&b.id));
        let one = |s: &&Sample| -> Option<Prediction> {
            if self.is_cancelled() {
                return None;
            }
            Some(f(s).unwrap_or_else(|e| {
                tracing::warn!(sample = %s.id, "sample failed: {e}");
                Prediction::failed(&s.id, &e)
            }))
        };
        let pool = self.pool();
        let mut out = Vec::with_capacity(ordered.len());
        for chunk in ordered.chunks(self.checkpoint_every.max(1)) {
            let done: Vec<Option<Prediction>> = match &pool {
                None => chunk.iter().map(one).collect(),
                Some(p) => p.install(|| chunk.par_iter().map(one).collect()),
            };
            out.extend(done.into_iter().flatten());
            if let Some(cb) = self.checkpoint {
                cb(&out);
            }
            if self.is_cancelled() {
                break;
            }
        }
        out
    }

    pub fn run_zero_shot_cot(&self, samples: &[&Sample]) -> Vec<Prediction> {
        self.predict_each(samples, |s| {
            let trace = self.cot_trace(s)?;
            let failure = trace.reasoning.trim().is_empty().then(|| Failure {
                endpoint: false,
                message: "model returned empty reasoning".into(),
            });
            Ok(Prediction {
                sample_id: s.id.clone(),
                label: trace.answer.label,
                status: trace.answer.status,
                reasoning: Some(trace.reasoning),
                exemplar_id: None,
                prompt_hashes: trace.hashes,
                failure,
            })
        })
    }

    pub fn run_dynamic_one_shot(
        &self,
        samples: &[&Sample],
        store: &ExemplarStore,
        provider: &dyn EmbeddingProvider,
        selection: SelectionOptions,
    ) -> Result<Vec<Prediction>, StrategyError> {
        if provider.dim() != store.dim() {
            return Err(StrategyError::Precondition(format!(
                "embedding provider dimension {} does not match store dimension {}",
                provider.dim(),
                store.dim()
            )));
        }
        let preds = self.predict_each(samples, |s| {
            let (trace, exemplar_id) = self.oneshot_answer(s, store, provider, selection)?;
            Ok(Prediction {
                sample_id: s.id.clone(),
                label: trace.answer.label,
                status: trace.answer.status,
                reasoning: None,
                exemplar_id: Some(exemplar_id),
                prompt_hashes: vec![trace.hash],
                failure: None,
            })
        });
        Ok(preds)
    }

    /// Answers with the pool's highest-F1 instruction.
    pub fn run_opro_predict(
        &self,
        samples: &[&Sample],
        pool: &InstructionPool,
    ) -> Result<Vec<Prediction>, StrategyError> {
        let best = pool
            .best()
            .ok_or_else(|| StrategyError::Precondition("instruction pool is empty".into()))?;
        let preds = self.predict_each(samples, |s| {
            let trace = self.instruction_answer(best.text(), s)?;
            Ok(Prediction {
                sample_id: s.id.clone(),
                label: trace.answer.label,
                status: trace.answer.status,
                reasoning: None,
                exemplar_id: None,
                prompt_hashes: vec![trace.hash],
                failure: None,
            })
        });
        Ok(preds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    /// Finished, but some samples failed and carry fallback labels.
    Partial,
    Interrupted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSummary {
    pub sample_id: String,
    pub endpoint: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub strategy: Strategy,
    pub model: String,
    pub template_versions: BTreeMap<String, String>,
    /// Effective configuration, secrets excluded.
    pub config: serde_json::Value,
    /// Input and output paths of the run.
    pub files: BTreeMap<String, String>,
    pub started: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    pub status: RunStatus,
    pub total: usize,
    pub done: usize,
    pub failures: Vec<FailureSummary>,
    pub network_calls: u64,
    pub cache_hits: u64,
}

impl RunManifest {
    pub fn start(
        strategy: Strategy,
        model: &str,
        template_versions: BTreeMap<String, String>,
        config: serde_json::Value,
        files: BTreeMap<String, String>,
        total: usize,
    ) -> Self {
        RunManifest {
            strategy,
            model: model.to_string(),
            template_versions,
            config,
            files,
            started: Utc::now(),
            finished: None,
            status: RunStatus::Running,
            total,
            done: 0,
            failures: Vec::new(),
            network_calls: 0,
            cache_hits: 0,
        }
    }

    pub fn record_progress(&mut self, preds: &[Prediction], llm: &LlmClient) {
        self.done = preds.len();
        self.failures = preds
            .iter()
            .filter_map(|p| {
                p.failure.as_ref().map(|f| FailureSummary {
                    sample_id: p.sample_id.clone(),
                    endpoint: f.endpoint,
                    message: f.message.clone(),
                })
            })
            .collect();
        self.network_calls = llm.network_calls();
        self.cache_hits = llm.stats().cache_hits.load(Ordering::SeqCst);
    }

    pub fn finish(&mut self, status: RunStatus) {
        self.status = status;
        self.finished = Some(Utc::now());
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, json.as_bytes())
    }
}

/// Status a finished run should report given its predictions.
pub fn completion_status(preds: &[Prediction], total: usize) -> RunStatus {
    if preds.len() < total {
        RunStatus::Interrupted
    } else if preds.iter().any(|p| p.failure.is_some()) {
        RunStatus::Partial
    } else {
        RunStatus::Completed
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionEntry {
    #[serde(rename = "Prediction")]
    prediction: Label,
}

/// `{sample_id: {"Prediction": label}}`, id-sorted, pretty-printed.
pub fn predictions_json(preds: &[Prediction]) -> String {
    let map: BTreeMap<&str, PredictionEntry> = preds
        .iter()
        .map(|p| {
            (
                p.sample_id.as_str(),
                PredictionEntry {
                    prediction: p.label,
                },
            )
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&map).expect("predictions serialize");
    s.push('\n');
    s
}

pub fn parse_predictions(text: &str) -> Result<Labels, serde_json::Error> {
    let map: BTreeMap<String, PredictionEntry> = serde_json::from_str(text)?;
    Ok(map.into_iter().map(|(k, v)| (k, v.prediction)).collect())
}

/// One JSON line per prediction with reasoning, status, exemplar and hashes.
pub fn details_jsonl(preds: &[Prediction]) -> String {
    preds
        .iter()
        .map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n")
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> std::io::Result<()> {
    write_atomic(path, predictions_json(preds).as_bytes())
}

pub fn write_details(path: &Path, preds: &[Prediction]) -> std::io::Result<()> {
    write_atomic(path, details_jsonl(preds).as_bytes())
}
