//! Prompt templates and the message builders for each strategy.
//!
//! Templates are UTF-8 text with `{placeholder}` slots; `{{` and `}}` are
//! literal braces. Substitution is a single pass, so values are never
//! re-scanned for placeholders. Defaults ship in `templates/` and any of them
//! can be replaced by a same-named file in a template directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Label, Sample};
use crate::exemplars::Exemplar;
use crate::llm::{ChatRequest, GenerationParams, Message};
use crate::opro::InstructionPool;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: placeholder {{{name}}} is not available here")]
    UnsupportedPlaceholder { template: String, name: String },
    #[error("template {template}: required placeholder {{{name}}} is missing")]
    MissingPlaceholder { template: String, name: String },
    #[error("template {template}: {reason} at byte {offset}")]
    Syntax {
        template: String,
        reason: &'static str,
        offset: usize,
    },
    #[error("template {template}: no value supplied for {{{name}}}")]
    MissingValue { template: String, name: String },
    #[error("reading template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot build a formatting prompt from empty reasoning")]
    EmptyReasoning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placeholder {
    Statement,
    Evidence,
    Reasoning,
    ExemplarStatement,
    ExemplarReasoning,
    ExemplarLabel,
    InstructionList,
    SampleBlock,
    Instruction,
    AnswerFormat,
}

impl Placeholder {
    pub const ALL: [Placeholder; 10] = [
        Placeholder::Statement,
        Placeholder::Evidence,
        Placeholder::Reasoning,
        Placeholder::ExemplarStatement,
        Placeholder::ExemplarReasoning,
        Placeholder::ExemplarLabel,
        Placeholder::InstructionList,
        Placeholder::SampleBlock,
        Placeholder::Instruction,
        Placeholder::AnswerFormat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Statement => "statement",
            Placeholder::Evidence => "evidence",
            Placeholder::Reasoning => "reasoning",
            Placeholder::ExemplarStatement => "exemplar_statement",
            Placeholder::ExemplarReasoning => "exemplar_reasoning",
            Placeholder::ExemplarLabel => "exemplar_label",
            Placeholder::InstructionList => "instruction_list",
            Placeholder::SampleBlock => "sample_block",
            Placeholder::Instruction => "instruction",
            Placeholder::AnswerFormat => "answer_format",
        }
    }

    pub fn from_name(name: &str) -> Option<Placeholder> {
        Placeholder::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub segments: Vec<Segment>,
    /// First 12 hex digits of the SHA-256 of the source text.
    pub version: String,
}

impl PromptTemplate {
    /// Parses template source. One trailing newline is dropped.
    pub fn parse(name: &str, source: &str) -> Result<Self, PromptError> {
        let body = source.strip_suffix('\n').unwrap_or(source);
        let syntax = |reason, offset| PromptError::Syntax {
            template: name.to_string(),
            reason,
            offset,
        };
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut chars = body.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            match c {
                '{' if chars.peek().map(|&(_, n)| n) == Some('{') => {
                    chars.next();
                    literal.push('{');
                }
                '}' if chars.peek().map(|&(_, n)| n) == Some('}') => {
                    chars.next();
                    literal.push('}');
                }
                '{' => {
                    let rest = &body[i + 1..];
                    let close = rest
                        .find(['}', '{', '\n'])
                        .filter(|&j| rest.as_bytes()[j] == b'}')
                        .ok_or_else(|| syntax("unclosed placeholder", i))?;
                    let ident = &rest[..close];
                    let slot = Placeholder::from_name(ident).ok_or_else(|| {
                        PromptError::UnknownPlaceholder {
                            template: name.to_string(),
                            name: ident.to_string(),
                        }
                    })?;
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Slot(slot));
                    for _ in 0..=close {
                        chars.next();
                    }
                }
                '}' => return Err(syntax("unmatched '}'", i)),
                c => literal.push(c),
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        let digest = Sha256::digest(source.as_bytes());
        Ok(PromptTemplate {
            name: name.to_string(),
            segments,
            version: hex::encode(&digest[..6]),
        })
    }

    pub fn placeholders(&self) -> BTreeSet<Placeholder> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(p) => Some(*p),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    /// Substitutes every slot from `values`. Values are inserted verbatim.
    pub fn render(&self, values: &[(Placeholder, &str)]) -> Result<String, PromptError> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(p) => {
                    let v = values
                        .iter()
                        .find(|(k, _)| k == p)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::MissingValue {
                            template: self.name.clone(),
                            name: p.name().to_string(),
                        })?;
                    out.push_str(v);
                }
            }
        }
        Ok(out)
    }
}

/// The six templates a run needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateKind {
    CotReasoning,
    CotFormatting,
    AnswerFormat,
    OneShot,
    OproMeta,
    OproPredict,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 6] = [
        TemplateKind::CotReasoning,
        TemplateKind::CotFormatting,
        TemplateKind::AnswerFormat,
        TemplateKind::OneShot,
        TemplateKind::OproMeta,
        TemplateKind::OproPredict,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            TemplateKind::CotReasoning => "cot_reasoning",
            TemplateKind::CotFormatting => "cot_formatting",
            TemplateKind::AnswerFormat => "answer_format",
            TemplateKind::OneShot => "oneshot",
            TemplateKind::OproMeta => "opro_meta",
            TemplateKind::OproPredict => "opro_predict",
        }
    }

    fn default_source(self) -> &'static str {
        match self {
            TemplateKind::CotReasoning => include_str!("../templates/cot_reasoning.txt"),
            TemplateKind::CotFormatting => include_str!("../templates/cot_formatting.txt"),
            TemplateKind::AnswerFormat => include_str!("../templates/answer_format.txt"),
            TemplateKind::OneShot => include_str!("../templates/oneshot.txt"),
            TemplateKind::OproMeta => include_str!("../templates/opro_meta.txt"),
            TemplateKind::OproPredict => include_str!("../templates/opro_predict.txt"),
        }
    }

    /// (required, optional) placeholders.
    fn slots(self) -> (&'static [Placeholder], &'static [Placeholder]) {
        use Placeholder::*;
        match self {
            TemplateKind::CotReasoning => (&[Statement, Evidence], &[]),
            TemplateKind::CotFormatting => (&[Reasoning, AnswerFormat], &[Statement]),
            TemplateKind::AnswerFormat => (&[], &[]),
            TemplateKind::OneShot => (
                &[
                    ExemplarStatement,
                    ExemplarReasoning,
                    ExemplarLabel,
                    Evidence,
                    Statement,
                    AnswerFormat,
                ],
                &[],
            ),
            TemplateKind::OproMeta => (&[InstructionList, SampleBlock], &[]),
            TemplateKind::OproPredict => (&[Instruction, Evidence, Statement, AnswerFormat], &[]),
        }
    }

    fn check(self, t: &PromptTemplate) -> Result<(), PromptError> {
        let (required, optional) = self.slots();
        let used = t.placeholders();
        if let Some(p) = used
            .iter()
            .find(|p| !required.contains(p) && !optional.contains(p))
        {
            return Err(PromptError::UnsupportedPlaceholder {
                template: t.name.clone(),
                name: p.name().to_string(),
            });
        }
        if let Some(p) = required.iter().find(|p| !used.contains(p)) {
            return Err(PromptError::MissingPlaceholder {
                template: t.name.clone(),
                name: p.name().to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateKind, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let templates = TemplateKind::ALL
            .into_iter()
            .map(|k| {
                let t = PromptTemplate::parse(k.file_stem(), k.default_source())
                    .expect("bundled templates parse");
                k.check(&t).expect("bundled templates are well-formed");
                (k, t)
            })
            .collect();
        TemplateSet { templates }
    }
}

impl TemplateSet {
    /// Bundled templates, each overridden by `<dir>/<name>.txt` when that file exists.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = TemplateSet::default();
        for kind in TemplateKind::ALL {
            let path = dir.join(format!("{}.txt", kind.file_stem()));
            if !path.is_file() {
                continue;
            }
            let source = fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.clone(),
                source,
            })?;
            set.set(kind, &source)?;
        }
        Ok(set)
    }

    pub fn set(&mut self, kind: TemplateKind, source: &str) -> Result<(), PromptError> {
        let t = PromptTemplate::parse(kind.file_stem(), source)?;
        kind.check(&t)?;
        self.templates.insert(kind, t);
        Ok(())
    }

    pub fn get(&self, kind: TemplateKind) -> &PromptTemplate {
        &self.templates[&kind]
    }

    /// Template name to version hash, for run manifests.
    pub fn versions(&self) -> BTreeMap<String, String> {
        self.templates
            .values()
            .map(|t| (t.name.clone(), t.version.clone()))
            .collect()
    }

    fn render(&self, kind: TemplateKind, values: &[(Placeholder, &str)]) -> String {
        // Slots were checked against the kind at load time and every builder
        // supplies all of them, so rendering cannot fail here.
        self.get(kind)
            .render(values)
            .expect("builder supplies every placeholder of its template kind")
    }

    fn answer_format(&self) -> String {
        self.render(TemplateKind::AnswerFormat, &[])
    }
}

/// A gold-labeled example shown to the instruction generator.
#[derive(Debug, Clone, Copy)]
pub struct Demo<'a> {
    pub statement: &'a str,
    pub evidence: &'a str,
    pub gold: Label,
}

/// Builds chat requests from templates. All builders are pure.
#[derive(Debug, Clone, Default)]
pub struct PromptBuilder {
    pub templates: TemplateSet,
    /// Parameters for every request except instruction generation.
    pub params: GenerationParams,
}

impl PromptBuilder {
    pub fn new(templates: TemplateSet, params: GenerationParams) -> Self {
        PromptBuilder { templates, params }
    }

    fn request(&self, text: String, params: GenerationParams) -> ChatRequest {
        ChatRequest {
            messages: vec![Message::user(text)],
            params,
            draw: None,
        }
    }

    pub fn build_cot_reasoning(&self, sample: &Sample, evidence: &str) -> ChatRequest {
        let text = self.templates.render(
            TemplateKind::CotReasoning,
            &[
                (Placeholder::Statement, &sample.statement),
                (Placeholder::Evidence, evidence),
            ],
        );
        self.request(text, self.params)
    }

    pub fn build_formatting(
        &self,
        sample: &Sample,
        reasoning: &str,
    ) -> Result<ChatRequest, PromptError> {
        if reasoning.trim().is_empty() {
            return Err(PromptError::EmptyReasoning);
        }
        let format = self.templates.answer_format();
        let text = self.templates.render(
            TemplateKind::CotFormatting,
            &[
                (Placeholder::Statement, &sample.statement),
                (Placeholder::Reasoning, reasoning),
                (Placeholder::AnswerFormat, &format),
            ],
        );
        Ok(self.request(text, self.params))
    }

    pub fn build_oneshot(
        &self,
        sample: &Sample,
        evidence: &str,
        exemplar: &Exemplar,
    ) -> ChatRequest {
        let format = self.templates.answer_format();
        let text = self.templates.render(
            TemplateKind::OneShot,
            &[
                (Placeholder::ExemplarStatement, &exemplar.statement),
                (Placeholder::ExemplarReasoning, &exemplar.reasoning),
                (Placeholder::ExemplarLabel, exemplar.label.as_str()),
                (Placeholder::Evidence, evidence),
                (Placeholder::Statement, &sample.statement),
                (Placeholder::AnswerFormat, &format),
            ],
        );
        self.request(text, self.params)
    }

    /// Meta-prompt listing the pool in ascending score order, then the demos.
    pub fn build_opro_meta(
        &self,
        pool: &InstructionPool,
        demos: &[Demo<'_>],
        params: GenerationParams,
    ) -> ChatRequest {
        let mut list = String::new();
        if !pool.is_empty() {
            list.push_str(
                "\nBelow are previous instructions with their F1 scores, from lowest to highest score:\n",
            );
            for instr in pool.items() {
                let _ = write!(list, "\ntext: {}\nscore: {:.2}\n", instr.text(), instr.f1());
            }
        }
        let block = demos
            .iter()
            .map(|d| {
                format!(
                    "Report:\n{}\nStatement: {}\nLabel: {}",
                    d.evidence, d.statement, d.gold
                )
            })
            .collect::<Vec<_>>()
            .join("\n\n");
        let text = self.templates.render(
            TemplateKind::OproMeta,
            &[
                (Placeholder::InstructionList, &list),
                (Placeholder::SampleBlock, &block),
            ],
        );
        self.request(text, params)
    }

    /// Single-call prompt: instruction, evidence, statement, answer directive.
    pub fn build_opro_predict(
        &self,
        instruction: &str,
        sample: &Sample,
        evidence: &str,
    ) -> ChatRequest {
        let format = self.templates.answer_format();
        let text = self.templates.render(
            TemplateKind::OproPredict,
            &[
                (Placeholder::Instruction, instruction),
                (Placeholder::Evidence, evidence),
                (Placeholder::Statement, &sample.statement),
                (Placeholder::AnswerFormat, &format),
            ],
        );
        self.request(text, self.params)
    }
}
