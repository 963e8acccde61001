//! Run configuration: a flat `key = value` file, overridden by flags.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use trialnli::exemplars::EmbeddingProvider;
use trialnli::{
    EndpointConfig, F1Mode, GenerationParams, HashEmbedder, HttpEmbedder, LlmClient, OproConfig,
    ParseOptions, PromptBuilder, Renderer, ResponseCache, RetryPolicy, SelectionOptions,
    SubtitleRule, TemplateSet, TierPriority,
};

pub const DEFAULT_API_KEY_ENV: &str = "LLM_API_KEY";

/// Every tunable, all optional so file and flag layers can be merged.
/// Keys in the config file use the field names (`max_tokens = 512`).
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Base URL of the OpenAI-compatible endpoint, e.g. http://localhost:8000/v1
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the bearer token
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    /// Concurrent requests
    #[arg(long)]
    pub workers: Option<usize>,
    /// Response cache file (JSON lines); in-memory when unset
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Directory with template overrides
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// Refuse prompts longer than this many characters
    #[arg(long)]
    pub max_prompt_chars: Option<usize>,
    /// Requests per minute
    #[arg(long)]
    pub rpm: Option<u32>,
    /// Attempts per request, including the first
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub backoff_ms: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// hash or http
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub embedding_model: Option<String>,
    /// Defaults to the chat endpoint base URL
    #[arg(long)]
    pub embedding_url: Option<String>,
    #[arg(long)]
    pub keyword_rescue: Option<bool>,
    /// section-first or type-first
    #[arg(long)]
    pub tier_priority: Option<String>,
    #[arg(long)]
    pub exclude_identical_statement: Option<bool>,
    /// Regex marking cohort subtitle lines
    #[arg(long)]
    pub subtitle_regex: Option<String>,
    /// entailment-positive or macro
    #[arg(long)]
    pub f1_mode: Option<String>,
    #[arg(long)]
    pub opro_iterations: Option<u32>,
    #[arg(long)]
    pub opro_demos: Option<usize>,
    #[arg(long)]
    pub opro_eval: Option<usize>,
    #[arg(long)]
    pub opro_capacity: Option<usize>,
    #[arg(long)]
    pub opro_temperature: Option<f64>,
    #[arg(long)]
    pub opro_max_tokens: Option<u32>,
}

macro_rules! overlay {
    ($top:expr, $base:expr, $($field:ident),* $(,)?) => {
        Settings { $($field: $top.$field.or($base.$field),)* }
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Values set in `self` win over those in `base`.
    pub fn over(self, base: Settings) -> Settings {
        overlay!(
            self,
            base,
            endpoint,
            model,
            api_key_env,
            timeout_secs,
            workers,
            cache,
            templates,
            temperature,
            max_tokens,
            max_prompt_chars,
            rpm,
            retries,
            backoff_ms,
            checkpoint_every,
            seed,
            embedder,
            embedding_dim,
            embedding_model,
            embedding_url,
            keyword_rescue,
            tier_priority,
            exclude_identical_statement,
            subtitle_regex,
            f1_mode,
            opro_iterations,
            opro_demos,
            opro_eval,
            opro_capacity,
            opro_temperature,
            opro_max_tokens,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hash,
    Http,
}

/// Fully resolved and checked configuration. Serialized into run manifests.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub endpoint: Option<String>,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub workers: usize,
    pub cache: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub generation: GenerationParams,
    pub max_prompt_chars: Option<usize>,
    pub rpm: Option<u32>,
    pub retry: RetryPolicy,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub embedder: EmbedderKind,
    pub embedding_dim: usize,
    pub embedding_model: String,
    pub embedding_url: Option<String>,
    pub parse: ParseOptions,
    pub selection: SelectionOptions,
    pub subtitle_regex: Option<String>,
    pub f1_mode: F1Mode,
    pub opro: OproConfig,
    #[serde(skip)]
    pub template_set: TemplateSet,
    #[serde(skip)]
    pub renderer: Renderer,
}

fn parse_kebab<T: for<'de> Deserialize<'de>>(what: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| anyhow!("invalid {what} {v:?}"))
}

impl RunConfig {
    /// Applies defaults and checks everything that can be checked offline.
    pub fn resolve(s: Settings) -> Result<RunConfig> {
        let workers = s.workers.unwrap_or(4);
        if workers == 0 {
            bail!("workers must be positive");
        }
        let generation = GenerationParams::new(
            s.temperature.unwrap_or(0.0),
            s.max_tokens.unwrap_or(1024),
            s.temperature.is_some_and(|t| t > 0.0),
        )?;
        let embedder = match s.embedder.as_deref().unwrap_or("hash") {
            "hash" => EmbedderKind::Hash,
            "http" => EmbedderKind::Http,
            other => bail!("invalid embedder {other:?} (expected hash or http)"),
        };
        let embedding_dim = s.embedding_dim.unwrap_or(256);
        if embedding_dim == 0 {
            bail!("embedding_dim must be positive");
        }
        let template_set = match &s.templates {
            Some(dir) if !dir.is_dir() => bail!("template directory {} not found", dir.display()),
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::default(),
        };
        let renderer = match &s.subtitle_regex {
            Some(re) => Renderer::new(SubtitleRule::pattern(re)?),
            None => Renderer::default(),
        };
        if let Some(cache) = &s.cache {
            let parent = cache.parent().filter(|p| !p.as_os_str().is_empty());
            if parent.is_some_and(|p| !p.is_dir()) {
                bail!("cache directory for {} does not exist", cache.display());
            }
        }
        let defaults = OproConfig::default();
        let opro = OproConfig {
            iterations: s.opro_iterations.unwrap_or(defaults.iterations),
            demo_count: s.opro_demos.unwrap_or(defaults.demo_count),
            eval_count: s.opro_eval.unwrap_or(defaults.eval_count),
            capacity: s.opro_capacity.unwrap_or(defaults.capacity),
            instruction_sampling: GenerationParams::new(
                s.opro_temperature.unwrap_or(1.0),
                s.opro_max_tokens.unwrap_or(512),
                s.opro_temperature.map_or(true, |t| t > 0.0),
            )?,
            seed: s.seed.unwrap_or(0),
            seed_instructions: defaults.seed_instructions,
        };
        opro.validate()?;
        Ok(RunConfig {
            endpoint: s.endpoint,
            model: s.model.unwrap_or_else(|| "default".into()),
            api_key_env: s.api_key_env.unwrap_or_else(|| DEFAULT_API_KEY_ENV.into()),
            timeout_secs: s.timeout_secs.unwrap_or(300),
            workers,
            cache: s.cache,
            templates: s.templates,
            generation,
            max_prompt_chars: s.max_prompt_chars,
            rpm: s.rpm,
            retry: RetryPolicy {
                attempts: s.retries.unwrap_or(3).max(1),
                initial_backoff: Duration::from_millis(s.backoff_ms.unwrap_or(1000)),
            },
            checkpoint_every: s.checkpoint_every.unwrap_or(25).max(1),
            seed: s.seed.unwrap_or(0),
            embedder,
            embedding_dim,
            embedding_model: s.embedding_model.unwrap_or_else(|| "default".into()),
            embedding_url: s.embedding_url,
            parse: ParseOptions {
                keyword_rescue: s.keyword_rescue.unwrap_or(true),
            },
            selection: SelectionOptions {
                priority: match &s.tier_priority {
                    Some(v) => parse_kebab::<TierPriority>("tier_priority", v)?,
                    None => TierPriority::default(),
                },
                exclude_identical_statement: s.exclude_identical_statement.unwrap_or(true),
            },
            subtitle_regex: s.subtitle_regex,
            f1_mode: match &s.f1_mode {
                Some(v) => parse_kebab::<F1Mode>("f1_mode", v)?,
                None => F1Mode::default(),
            },
            opro,
            template_set,
            renderer,
        })
    }

    pub fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
    }

    pub fn prompts(&self) -> PromptBuilder {
        PromptBuilder::new(self.template_set.clone(), self.generation)
    }

    /// Cached HTTP client. Needs `endpoint`.
    pub fn client(&self) -> Result<LlmClient> {
        let url = self
            .endpoint
            .as_deref()
            .ok_or_else(|| anyhow!("no endpoint configured (set endpoint or --endpoint)"))?;
        let mut ep = EndpointConfig::new(url, &self.model);
        ep.api_key = self.api_key();
        ep.timeout_secs = self.timeout_secs;
        let cache = match &self.cache {
            Some(p) => ResponseCache::open(p)?,
            None => ResponseCache::in_memory(),
        };
        Ok(LlmClient::http(&ep)?
            .with_cache(cache)
            .with_retry(self.retry)
            .with_rate_limit(self.rpm)
            .with_prompt_limit(self.max_prompt_chars))
    }

    pub fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match self.embedder {
            EmbedderKind::Hash => Box::new(HashEmbedder::new(self.embedding_dim, self.seed)),
            EmbedderKind::Http => {
                let url = self
                    .embedding_url
                    .as_deref()
                    .or(self.endpoint.as_deref())
                    .ok_or_else(|| anyhow!("http embedder needs embedding_url or endpoint"))?;
                Box::new(HttpEmbedder::new(
                    url,
                    &self.embedding_model,
                    self.api_key(),
                    self.embedding_dim,
                )?)
            }
        })
    }
}
