//! Instruction search by prompting the model with scored past instructions.
//!
//! Each iteration formats the current pool and a few gold-labeled demos into a
//! meta-prompt, asks for one new instruction (with sampling enabled), scores
//! it by F1 on a fixed evaluation set and admits it to the bounded pool when
//! it beats the pool's lowest score.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, Sample};
use crate::fsutil::write_atomic;
use crate::llm::{GenerationParams, LlmError};
use crate::metrics::{self, Labels};
use crate::prompts::Demo;
use crate::strategies::{Harness, StrategyError};

pub const SEED_INSTRUCTION: &str =
    "Decide whether the statement is entailed by or contradicts the report.";

#[derive(Debug, Error)]
pub enum OproError {
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("F1 score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need {needed} gold-labeled samples, found {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("iteration log {path}: {source}")]
    Log {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("pool file {path}: {reason}")]
    PoolFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("aborted at iteration {iter}: {source}")]
    Aborted {
        iter: u32,
        #[source]
        source: Box<OproError>,
        partial: Box<OproOutcome>,
    },
}

impl OproError {
    /// The underlying endpoint error, if this failure came from the model API.
    pub fn llm_error(&self) -> Option<&LlmError> {
        match self {
            OproError::Strategy(StrategyError::Llm(e)) => Some(e),
            OproError::Aborted { source, .. } => source.llm_error(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInstruction", into = "RawInstruction")]
pub struct Instruction {
    text: String,
    f1: f64,
}

#[derive(Serialize, Deserialize)]
struct RawInstruction {
    text: String,
    f1: f64,
}

impl TryFrom<RawInstruction> for Instruction {
    type Error = OproError;
    fn try_from(r: RawInstruction) -> Result<Self, OproError> {
        Instruction::new(r.text, r.f1)
    }
}

impl From<Instruction> for RawInstruction {
    fn from(i: Instruction) -> Self {
        RawInstruction {
            text: i.text,
            f1: i.f1,
        }
    }
}

impl Instruction {
    /// Trims `text`; rejects empty text and scores outside [0, 1].
    pub fn new(text: impl AsRef<str>, f1: f64) -> Result<Self, OproError> {
        let text = text.as_ref().trim();
        if text.is_empty() {
            return Err(OproError::EmptyInstruction);
        }
        if !(0.0..=1.0).contains(&f1) {
            return Err(OproError::ScoreOutOfRange(f1));
        }
        Ok(Instruction {
            text: text.to_string(),
            f1,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn f1(&self) -> f64 {
        self.f1
    }
}

/// At most `capacity` instructions, sorted ascending by (F1, text).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPool", into = "RawPool")]
pub struct InstructionPool {
    items: Vec<Instruction>,
    capacity: usize,
}

#[derive(Serialize, Deserialize)]
struct RawPool {
    capacity: usize,
    items: Vec<Instruction>,
}

impl TryFrom<RawPool> for InstructionPool {
    type Error = OproError;
    fn try_from(r: RawPool) -> Result<Self, OproError> {
        if r.capacity == 0 {
            return Err(OproError::Config("pool capacity must be positive".into()));
        }
        if r.items.len() > r.capacity {
            return Err(OproError::Config(format!(
                "pool holds {} items but capacity is {}",
                r.items.len(),
                r.capacity
            )));
        }
        let mut pool = InstructionPool {
            items: r.items,
            capacity: r.capacity,
        };
        pool.sort();
        Ok(pool)
    }
}

impl From<InstructionPool> for RawPool {
    fn from(p: InstructionPool) -> Self {
        RawPool {
            capacity: p.capacity,
            items: p.items,
        }
    }
}

impl InstructionPool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "pool capacity must be positive");
        InstructionPool {
            items: Vec::new(),
            capacity,
        }
    }

    pub fn items(&self) -> &[Instruction] {
        &self.items
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() >= self.capacity
    }

    pub fn min_f1(&self) -> Option<f64> {
        self.items.first().map(Instruction::f1)
    }

    pub fn best(&self) -> Option<&Instruction> {
        self.items.last()
    }

    fn sort(&mut self) {
        self.items
            .sort_by(|a, b| a.f1.total_cmp(&b.f1).then_with(|| a.text.cmp(&b.text)));
    }

    /// Inserts while below capacity; otherwise replaces the lowest-scoring
    /// instruction only if `cand` scores strictly higher. Returns whether
    /// `cand` was admitted.
    pub fn update(&mut self, cand: Instruction) -> bool {
        if !self.is_full() {
            self.items.push(cand);
        } else if self.min_f1().is_some_and(|m| cand.f1 > m) {
            self.items.remove(0);
            self.items.push(cand);
        } else {
            return false;
        }
        self.sort();
        true
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_string_pretty(self).expect("pool serializes");
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, OproError> {
        let bad = |reason: String| OproError::PoolFile {
            path: path.to_path_buf(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

/// Functional form of [`InstructionPool::update`].
pub fn update_pool(pool: &InstructionPool, cand: Instruction) -> InstructionPool {
    let mut next = pool.clone();
    next.update(cand);
    next
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OproConfig {
    pub iterations: u32,
    pub demo_count: usize,
    pub eval_count: usize,
    pub capacity: usize,
    pub instruction_sampling: GenerationParams,
    /// Seeds the demo/eval split.
    pub seed: u64,
    /// Scored before the first iteration to form the initial pool.
    pub seed_instructions: Vec<String>,
}

impl Default for OproConfig {
    fn default() -> Self {
        OproConfig {
            iterations: 10,
            demo_count: 8,
            eval_count: 50,
            capacity: 8,
            instruction_sampling: GenerationParams::new(1.0, 512, true)
                .expect("static sampling params are valid"),
            seed: 0,
            seed_instructions: vec![SEED_INSTRUCTION.to_string()],
        }
    }
}

impl OproConfig {
    pub fn validate(&self) -> Result<(), OproError> {
        if self.demo_count == 0 || self.eval_count == 0 || self.capacity == 0 {
            return Err(OproError::Config(
                "demo_count, eval_count and capacity must be positive".into(),
            ));
        }
        if !self.instruction_sampling.sampling_enabled() {
            tracing::warn!("instruction generation is greedy; the search will be deterministic");
        }
        Ok(())
    }
}

/// Splits the gold-labeled samples into disjoint demo and eval sets with a
/// seeded shuffle of the id-sorted list.
pub fn split_demo_eval<'s>(
    samples: &[&'s Sample],
    cfg: &OproConfig,
) -> Result<(Vec<&'s Sample>, Vec<&'s Sample>), OproError> {
    let mut labeled: Vec<&Sample> = samples
        .iter()
        .copied()
        .filter(|s| s.gold.is_some())
        .collect();
    labeled.sort_by(|a, b| a.id.cmp(&b.id));
    labeled.dedup_by(|a, b| a.id == b.id);
    let needed = cfg.demo_count + cfg.eval_count;
    if labeled.len() < needed {
        return Err(OproError::InsufficientSamples {
            needed,
            found: labeled.len(),
        });
    }
    labeled.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut demos = labeled[..cfg.demo_count].to_vec();
    let mut eval = labeled[cfg.demo_count..needed].to_vec();
    demos.sort_by(|a, b| a.id.cmp(&b.id));
    eval.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((demos, eval))
}

/// The text between the first `[` and the next `]` when present, otherwise
/// the whole reply; trimmed. `None` if nothing is left.
pub fn extract_candidate(reply: &str) -> Option<String> {
    let bracketed = reply.find('[').and_then(|open| {
        let rest = &reply[open + 1..];
        rest.find(']').map(|close| &rest[..close])
    });
    let text = bracketed.unwrap_or(reply).trim();
    (!text.is_empty()).then(|| text.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    pub f1: f64,
    pub predictions: Labels,
}

/// F1 of `instruction` over `eval` using the single-call prompt.
pub fn score_instruction(
    instruction: &str,
    eval: &[&Sample],
    harness: &Harness<'_>,
) -> Result<ScoreTrace, StrategyError> {
    let answers = harness.try_map(eval, |s| harness.instruction_answer(instruction, s))?;
    let predictions: Labels = eval
        .iter()
        .zip(answers)
        .map(|(s, a)| (s.id.clone(), a.answer.label))
        .collect();
    let gold: Labels = eval
        .iter()
        .filter_map(|s| s.gold.map(|g| (s.id.clone(), g)))
        .collect();
    let f1 =
        metrics::f1(&predictions, &gold).map_err(|e| StrategyError::Precondition(e.to_string()))?;
    Ok(ScoreTrace { f1, predictions })
}

/// One line of the iteration log. Iteration 0 holds the seed instructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: u32,
    pub candidate: String,
    /// `None` when the reply held no usable instruction.
    pub f1: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OproOutcome {
    pub pool: InstructionPool,
    pub log: Vec<IterationRecord>,
    pub demo_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

/// Appends each record as one JSON line and flushes it immediately.
pub struct IterationLog {
    path: PathBuf,
    file: File,
}

impl IterationLog {
    pub fn create(path: &Path) -> Result<Self, OproError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|source| OproError::Log {
                path: path.to_path_buf(),
                source,
            })?;
        Ok(IterationLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, rec: &IterationRecord) -> Result<(), OproError> {
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|source| OproError::Log {
                path: self.path.clone(),
                source,
            })
    }
}

pub fn read_iteration_log(path: &Path) -> Result<Vec<IterationRecord>, OproError> {
    let text = std::fs::read_to_string(path).map_err(|source| OproError::Log {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| OproError::Log {
                path: path.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })
        })
        .collect()
}

/// Runs the search over `samples` (demo and eval sets are drawn from them).
/// On failure the error carries the pool and log accumulated so far.
pub fn run_opro(
    cfg: &OproConfig,
    samples: &[&Sample],
    harness: &Harness<'_>,
    mut sink: Option<&mut IterationLog>,
) -> Result<OproOutcome, OproError> {
    cfg.validate()?;
    let (demos, eval) = split_demo_eval(samples, cfg)?;
    let mut outcome = OproOutcome {
        pool: InstructionPool::new(cfg.capacity),
        log: Vec::new(),
        demo_ids: demos.iter().map(|s| s.id.clone()).collect(),
        eval_ids: eval.iter().map(|s| s.id.clone()).collect(),
    };

    let mut record = |outcome: &mut OproOutcome, rec: IterationRecord| -> Result<(), OproError> {
        if let Some(log) = sink.as_deref_mut() {
            log.append(&rec)?;
        }
        outcome.log.push(rec);
        Ok(())
    };
    let abort = |iter: u32, err: OproError, outcome: &OproOutcome| OproError::Aborted {
        iter,
        source: Box::new(err),
        partial: Box::new(outcome.clone()),
    };

    for seed in &cfg.seed_instructions {
        let Some(text) = extract_candidate(seed) else {
            continue;
        };
        let trace =
            score_instruction(&text, &eval, harness).map_err(|e| abort(0, e.into(), &outcome))?;
        let accepted = outcome.pool.update(Instruction::new(&text, trace.f1)?);
        record(
            &mut outcome,
            IterationRecord {
                iter: 0,
                candidate: text,
                f1: Some(trace.f1),
                accepted,
            },
        )?;
    }

    let demo_evidence: Vec<String> = demos
        .iter()
        .map(|s| harness.evidence(s))
        .collect::<Result<_, _>>()
        .map_err(|e| abort(0, e.into(), &outcome))?;
    let demo_view: Vec<Demo<'_>> = demos
        .iter()
        .zip(&demo_evidence)
        .map(|(s, ev)| Demo {
            statement: &s.statement,
            evidence: ev,
            gold: s.gold.unwrap_or(Label::Contradiction),
        })
        .collect();

    for iter in 1..=cfg.iterations {
        let meta =
            harness
                .prompts
                .build_opro_meta(&outcome.pool, &demo_view, cfg.instruction_sampling);
        let meta = if cfg.instruction_sampling.sampling_enabled() {
            meta.with_draw(iter)
        } else {
            meta
        };
        let reply = harness
            .llm
            .complete(&meta)
            .map_err(|e| abort(iter, StrategyError::from(e).into(), &outcome))?;
        let rec = match extract_candidate(&reply.content) {
            None => IterationRecord {
                iter,
                candidate: String::new(),
                f1: None,
                accepted: false,
            },
            Some(text) => {
                let trace = score_instruction(&text, &eval, harness)
                    .map_err(|e| abort(iter, e.into(), &outcome))?;
                let accepted = outcome.pool.update(Instruction::new(&text, trace.f1)?);
                IterationRecord {
                    iter,
                    candidate: text,
                    f1: Some(trace.f1),
                    accepted,
                }
            }
        };
        tracing::info!(iter, f1 = ?rec.f1, accepted = rec.accepted, "opro iteration");
        record(&mut outcome, rec)?;
    }
    Ok(outcome)
}

/// Rebuilds a pool by replaying the scored events of an iteration log.
pub fn replay_log(capacity: usize, log: &[IterationRecord]) -> Result<InstructionPool, OproError> {
    let mut pool = InstructionPool::new(capacity);
    for rec in log {
        if let Some(f1) = rec.f1 {
            pool = update_pool(&pool, Instruction::new(&rec.candidate, f1)?);
        }
    }
    Ok(pool)
}
