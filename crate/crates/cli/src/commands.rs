//! Subcommand bodies. Each returns the process exit code.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, Context};
use trialnli::corpus::{load_contrast_links, load_samples};
use trialnli::exemplars::build_store;
use trialnli::metrics::MetricsError;
use trialnli::opro::{run_opro, IterationLog, OproError};
use trialnli::strategies::{
    completion_status, parse_predictions, write_details, write_predictions,
};
use trialnli::{
    Corpus, ExemplarError, ExemplarStore, F1Mode, Harness, InstructionPool, LlmClient,
    MetricsReport, Prediction, RunManifest, RunStatus, Sample, Strategy, StrategyError,
};

use crate::config::RunConfig;

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Invalid = 1,
    Config = 2,
    Endpoint = 3,
    Partial = 4,
    Interrupted = 130,
}

impl Exit {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// An error together with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Outcome = Result<Exit, Failure>;

trait OrExit<T> {
    fn or_exit(self, exit: Exit) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, exit: Exit) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            exit,
            error: e.into(),
        })
    }
}

fn config_error(msg: String) -> Failure {
    Failure {
        exit: Exit::Config,
        error: anyhow!(msg),
    }
}

/// `out.json` -> `out.<suffix>` next to it.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn check_out_dir(out: &Path) -> Result<(), Failure> {
    match out.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) if !dir.is_dir() => Err(config_error(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn select_samples(corpus: &Corpus, split: Option<&str>) -> Result<Vec<Sample>, Failure> {
    Ok(match split {
        Some(name) => corpus
            .split(name)
            .or_exit(Exit::Config)?
            .values()
            .cloned()
            .collect(),
        None => corpus.all_samples().into_values().collect(),
    })
}

pub fn cmd_validate(data_dir: &Path, out: &mut dyn std::io::Write) -> Exit {
    let report = Corpus::validate_dir(data_dir);
    let mut by_file: BTreeMap<&Path, Vec<String>> = BTreeMap::new();
    for (path, err) in &report.errors {
        by_file
            .entry(path.as_path())
            .or_default()
            .push(err.to_string());
    }
    for path in &report.files_checked {
        if !by_file.contains_key(path.as_path()) {
            let _ = writeln!(out, "ok    {}", path.display());
        }
    }
    for (path, errs) in &by_file {
        for e in errs {
            let _ = writeln!(out, "error {}: {e}", path.display());
        }
    }
    if report.is_clean() {
        let _ = writeln!(out, "{} files, no errors", report.files_checked.len());
        Exit::Ok
    } else {
        let _ = writeln!(out, "{} errors", report.errors.len().max(1));
        Exit::Invalid
    }
}

pub struct RunArgs<'a> {
    pub strategy: Strategy,
    pub data_dir: &'a Path,
    pub split: Option<&'a str>,
    pub out: &'a Path,
    pub store: Option<&'a Path>,
    pub pool: Option<&'a Path>,
}

enum Loaded {
    Plain,
    OneShot(ExemplarStore),
    Opro(InstructionPool),
}

fn manifest_files(args: &RunArgs<'_>, cfg: &RunConfig) -> BTreeMap<String, String> {
    let mut files = BTreeMap::new();
    let mut put = |k: &str, p: &Path| {
        files.insert(k.to_string(), p.display().to_string());
    };
    put("data_dir", args.data_dir);
    put("predictions", args.out);
    put("details", &sidecar(args.out, "details.jsonl"));
    if let Some(p) = args.store {
        put("store", p);
    }
    if let Some(p) = args.pool {
        put("pool", p);
    }
    if let Some(p) = &cfg.cache {
        put("cache", p);
    }
    if let Some(p) = &cfg.templates {
        put("templates", p);
    }
    files
}

/// Runs one strategy over a data directory and writes predictions, a
/// details sidecar and a manifest next to `args.out`.
pub fn cmd_run(args: &RunArgs<'_>, cfg: &RunConfig, cancel: Arc<AtomicBool>) -> Outcome {
    check_out_dir(args.out)?;
    let loaded = match args.strategy {
        Strategy::ZeroShotCot => Loaded::Plain,
        Strategy::DynamicOneShot => {
            let path = args
                .store
                .ok_or_else(|| config_error("oneshot needs --store".into()))?;
            if !path.is_file() {
                return Err(config_error(format!(
                    "store file {} not found",
                    path.display()
                )));
            }
            let store = ExemplarStore::load(path).or_exit(Exit::Config)?;
            if store.dim() != cfg.embedding_dim {
                return Err(config_error(format!(
                    "store dimension {} differs from embedding_dim {}",
                    store.dim(),
                    cfg.embedding_dim
                )));
            }
            Loaded::OneShot(store)
        }
        Strategy::Opro => {
            let path = args
                .pool
                .ok_or_else(|| config_error("opro needs --pool".into()))?;
            if !path.is_file() {
                return Err(config_error(format!(
                    "pool file {} not found",
                    path.display()
                )));
            }
            let pool = InstructionPool::load(path).or_exit(Exit::Config)?;
            if pool.is_empty() {
                return Err(config_error(format!(
                    "pool file {} is empty",
                    path.display()
                )));
            }
            Loaded::Opro(pool)
        }
    };
    let corpus = Corpus::load_dir(args.data_dir).or_exit(Exit::Config)?;
    let samples = select_samples(&corpus, args.split)?;
    let provider = match loaded {
        Loaded::OneShot(_) => Some(cfg.embedder().or_exit(Exit::Config)?),
        _ => None,
    };
    let llm = cfg.client().or_exit(Exit::Config)?;
    let prompts = cfg.prompts();

    let manifest_path = sidecar(args.out, "manifest.json");
    let manifest = Mutex::new(RunManifest::start(
        args.strategy,
        llm.model(),
        cfg.template_set.versions(),
        serde_json::to_value(cfg).expect("config serializes"),
        manifest_files(args, cfg),
        samples.len(),
    ));
    let checkpoint = |done: &[Prediction]| {
        let _ = llm.cache().sync();
        let mut m = manifest.lock().unwrap();
        m.record_progress(done, &llm);
        if let Err(e) = m.save(&manifest_path) {
            tracing::warn!("checkpoint manifest: {e}");
        }
    };
    let harness = Harness::new(&llm, &prompts, &corpus.trials)
        .with_workers(cfg.workers)
        .with_renderer(cfg.renderer.clone())
        .with_parse_options(cfg.parse)
        .with_checkpoint(cfg.checkpoint_every, &checkpoint)
        .with_cancel(Arc::clone(&cancel));

    let refs: Vec<&Sample> = samples.iter().collect();
    let preds = match &loaded {
        Loaded::Plain => harness.run_zero_shot_cot(&refs),
        Loaded::OneShot(store) => harness
            .run_dynamic_one_shot(&refs, store, provider.as_deref().unwrap(), cfg.selection)
            .or_exit(Exit::Config)?,
        Loaded::Opro(pool) => harness
            .run_opro_predict(&refs, pool)
            .or_exit(Exit::Config)?,
    };
    let cancelled = harness.is_cancelled();
    drop(harness);
    let manifest = manifest.lock().unwrap().clone();
    finish_run(args, &llm, manifest, &manifest_path, &preds, cancelled)
}

fn finish_run(
    args: &RunArgs<'_>,
    llm: &LlmClient,
    mut manifest: RunManifest,
    manifest_path: &Path,
    preds: &[Prediction],
    cancelled: bool,
) -> Outcome {
    llm.cache().sync().or_exit(Exit::Invalid)?;
    manifest.record_progress(preds, llm);
    let all_endpoint_failures = !preds.is_empty()
        && preds
            .iter()
            .all(|p| p.failure.as_ref().is_some_and(|f| f.endpoint));
    let (status, exit) = match completion_status(preds, manifest.total) {
        _ if cancelled => (RunStatus::Interrupted, Exit::Interrupted),
        RunStatus::Interrupted => (RunStatus::Interrupted, Exit::Interrupted),
        RunStatus::Partial if all_endpoint_failures => (RunStatus::Failed, Exit::Endpoint),
        RunStatus::Partial => (RunStatus::Partial, Exit::Partial),
        s => (s, Exit::Ok),
    };
    write_details(&sidecar(args.out, "details.jsonl"), preds).or_exit(Exit::Invalid)?;
    if matches!(exit, Exit::Ok | Exit::Partial) {
        write_predictions(args.out, preds).or_exit(Exit::Invalid)?;
    }
    manifest.finish(status);
    manifest.save(manifest_path).or_exit(Exit::Invalid)?;
    match exit {
        Exit::Endpoint => Err(Failure {
            exit,
            error: anyhow!(
                "every sample failed at the endpoint; first error: {}",
                preds[0].failure.as_ref().map_or("", |f| f.message.as_str())
            ),
        }),
        _ => Ok(exit),
    }
}

fn strategy_exit(e: &StrategyError) -> Exit {
    match e {
        StrategyError::Cancelled => Exit::Interrupted,
        StrategyError::Llm(l) if l.is_endpoint_failure() => Exit::Endpoint,
        StrategyError::Exemplar(x) if matches!(**x, ExemplarError::ProviderUnavailable(_)) => {
            Exit::Endpoint
        }
        _ => Exit::Invalid,
    }
}

/// Builds an exemplar store from the correctly answered samples of a split.
pub fn cmd_build_store(
    data_dir: &Path,
    split: Option<&str>,
    out: &Path,
    cfg: &RunConfig,
    cancel: Arc<AtomicBool>,
) -> Outcome {
    check_out_dir(out)?;
    let corpus = Corpus::load_dir(data_dir).or_exit(Exit::Config)?;
    let samples = select_samples(&corpus, split)?;
    let provider = cfg.embedder().or_exit(Exit::Config)?;
    let llm = cfg.client().or_exit(Exit::Config)?;
    let prompts = cfg.prompts();
    let harness = Harness::new(&llm, &prompts, &corpus.trials)
        .with_workers(cfg.workers)
        .with_renderer(cfg.renderer.clone())
        .with_parse_options(cfg.parse)
        .with_cancel(cancel);
    let refs: Vec<&Sample> = samples.iter().collect();
    let result = build_store(&refs, &harness, provider.as_ref());
    llm.cache().sync().or_exit(Exit::Invalid)?;
    let store = match result {
        Ok(store) => store,
        Err(ExemplarError::Strategy(e)) => {
            let exit = strategy_exit(&e);
            return Err(Failure {
                exit,
                error: e.into(),
            });
        }
        Err(e @ ExemplarError::ProviderUnavailable(_)) => {
            return Err(Failure {
                exit: Exit::Endpoint,
                error: e.into(),
            })
        }
        Err(e) => return Err(e).or_exit(Exit::Invalid),
    };
    store.save(out).or_exit(Exit::Invalid)?;
    tracing::info!(
        exemplars = store.len(),
        samples = samples.len(),
        "wrote {}",
        out.display()
    );
    Ok(Exit::Ok)
}

/// Instruction search. Writes the pool to `out` and the iteration log to
/// `<stem>.log.jsonl`; an aborted search leaves `<stem>.partial.json`.
pub fn cmd_opro(
    data_dir: &Path,
    split: Option<&str>,
    out: &Path,
    cfg: &RunConfig,
    cancel: Arc<AtomicBool>,
) -> Outcome {
    check_out_dir(out)?;
    let corpus = Corpus::load_dir(data_dir).or_exit(Exit::Config)?;
    let samples = select_samples(&corpus, split)?;
    let llm = cfg.client().or_exit(Exit::Config)?;
    let prompts = cfg.prompts();
    let harness = Harness::new(&llm, &prompts, &corpus.trials)
        .with_workers(cfg.workers)
        .with_renderer(cfg.renderer.clone())
        .with_parse_options(cfg.parse)
        .with_cancel(cancel);
    let mut log = IterationLog::create(&sidecar(out, "log.jsonl")).or_exit(Exit::Invalid)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let result = run_opro(&cfg.opro, &refs, &harness, Some(&mut log));
    llm.cache().sync().or_exit(Exit::Invalid)?;
    match result {
        Ok(outcome) => {
            outcome.pool.save(out).or_exit(Exit::Invalid)?;
            if let Some(best) = outcome.pool.best() {
                tracing::info!(f1 = best.f1(), "best instruction: {}", best.text());
            }
            Ok(Exit::Ok)
        }
        Err(OproError::Aborted {
            iter,
            source,
            partial,
        }) => {
            partial
                .pool
                .save(&sidecar(out, "partial.json"))
                .or_exit(Exit::Invalid)?;
            let exit = match source.llm_error() {
                Some(e) if e.is_endpoint_failure() => Exit::Endpoint,
                _ => match &*source {
                    OproError::Strategy(s) => strategy_exit(s),
                    _ => Exit::Invalid,
                },
            };
            Err(Failure {
                exit,
                error: anyhow!("search aborted at iteration {iter}: {source}"),
            })
        }
        Err(e @ (OproError::Config(_) | OproError::InsufficientSamples { .. })) => {
            Err(e).or_exit(Exit::Config)
        }
        Err(e) => Err(e).or_exit(Exit::Invalid),
    }
}

/// Scores a predictions file against gold labels and optional contrast links.
pub fn cmd_score(
    preds_path: &Path,
    gold_path: &Path,
    links_path: Option<&Path>,
    mode: F1Mode,
    out: &mut dyn std::io::Write,
) -> Outcome {
    let text = std::fs::read_to_string(preds_path)
        .with_context(|| format!("reading {}", preds_path.display()))
        .or_exit(Exit::Invalid)?;
    let preds = parse_predictions(&text)
        .with_context(|| format!("{} is not a predictions file", preds_path.display()))
        .or_exit(Exit::Invalid)?;
    let samples = load_samples(gold_path).or_exit(Exit::Invalid)?;
    let gold: BTreeMap<_, _> = samples
        .values()
        .filter_map(|s| s.gold.map(|g| (s.id.clone(), g)))
        .collect();
    let links = match links_path {
        Some(p) => load_contrast_links(p, &samples).or_exit(Exit::Invalid)?,
        None => Vec::new(),
    };
    let report = MetricsReport::evaluate(&preds, &gold, &links, mode)
        .map_err(|e: MetricsError| anyhow!(e))
        .or_exit(Exit::Invalid)?;
    let name = preds_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    writeln!(out, "{}\n{json}", report.to_table(&name)).or_exit(Exit::Invalid)?;
    Ok(Exit::Ok)
}
