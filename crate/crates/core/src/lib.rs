//! Prompt-engineering harness for clinical-trial natural language inference.
//!
//! Three strategies run against an OpenAI-compatible chat endpoint:
//! zero-shot chain-of-thought ([`Harness::run_zero_shot_cot`]), dynamic
//! one-shot with a retrieved worked example ([`Harness::run_dynamic_one_shot`])
//! and instruction search ([`opro::run_opro`] then [`Harness::run_opro_predict`]).
//! Predictions are scored with [`metrics`]: base F1 plus faithfulness and
//! consistency over contrast-set pairs.

pub mod answer;
pub mod corpus;
pub mod exemplars;
pub mod fsutil;
pub mod llm;
pub mod metrics;
pub mod opro;
pub mod prompts;
pub mod strategies;

pub use answer::{parse_label, parse_label_with, ParseOptions, ParseStatus, ParsedAnswer};
pub use corpus::{
    ClinicalTrial, ContrastKind, ContrastPair, Corpus, CorpusError, Label, Renderer, Sample,
    SampleType, SectionId, SubtitleRule, TrialIndex,
};
pub use exemplars::{
    Embedding, EmbeddingProvider, Exemplar, ExemplarError, ExemplarStore, HashEmbedder,
    HttpEmbedder, SelectionOptions, TierPriority,
};
pub use llm::{
    cache_key, CacheKey, ChatRequest, EndpointConfig, GenerationParams, LlmClient, LlmError,
    LlmResponse, Message, ResponseCache, RetryPolicy, Role, ScriptedBackend,
};
pub use metrics::{F1Mode, MetricsReport};
pub use opro::{Instruction, InstructionPool, OproConfig};
pub use prompts::{PromptBuilder, TemplateSet};
pub use strategies::{Harness, Prediction, RunManifest, RunStatus, Strategy, StrategyError};
