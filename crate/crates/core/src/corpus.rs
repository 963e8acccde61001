//! Clinical trial reports, NLI statements and contrast-set links.
//!
//! File layout understood by [`Corpus::load_dir`]:
//!
//! ```text
//! <data_dir>/
//!   train.json, dev.json, ...     samples files, one object keyed by sample id
//!   trials/<trial-id>.json        one file per clinical trial report
//!   contrast_links.json           optional contrast-set links
//! ```
//!
//! Key spellings follow the public task release and are validated strictly;
//! see `docs/data-format.md` at the repository root.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Samples file name that is never treated as a split.
pub const CONTRAST_LINKS_FILE: &str = "contrast_links.json";
/// Directory holding one JSON file per trial report.
pub const TRIALS_DIR: &str = "trials";
/// Directory name used by the original task release.
pub const TRIALS_DIR_RELEASE: &str = "CT json";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed record {id}: {reason}")]
    MalformedRecord { id: String, reason: String },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("sample {sample_id} references missing trial {trial_id}")]
    MissingTrial { sample_id: String, trial_id: String },
    #[error("contrast link references unknown sample {0}")]
    DanglingReference(String),
    #[error("contrast link {contrast_id} -> {original_id}: kind contradicts gold labels")]
    KindLabelMismatch {
        contrast_id: String,
        original_id: String,
    },
    #[error("no sample files found in {0}")]
    NoSampleFiles(PathBuf),
    #[error("unknown split {0}")]
    UnknownSplit(String),
    #[error("invalid subtitle pattern: {0}")]
    BadPattern(#[from] regex::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Binary NLI label. Numeric encoding: Entailment = 1, Contradiction = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Entailment,
    Contradiction,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Entailment, Label::Contradiction];

    pub fn as_bit(self) -> u8 {
        match self {
            Label::Entailment => 1,
            Label::Contradiction => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "Entailment",
            Label::Contradiction => "Contradiction",
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Entailment => Label::Contradiction,
            Label::Contradiction => Label::Entailment,
        }
    }

    /// Case-insensitive match against the two label words, ignoring surrounding whitespace.
    pub fn parse_loose(s: &str) -> Option<Label> {
        let s = s.trim();
        Label::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SectionId {
    #[serde(rename = "Adverse Events")]
    AdverseEvents,
    #[serde(rename = "Eligibility")]
    EligibilityCriteria,
    #[serde(rename = "Results")]
    Results,
    #[serde(rename = "Intervention")]
    Interventions,
}

impl SectionId {
    pub const ALL: [SectionId; 4] = [
        SectionId::AdverseEvents,
        SectionId::EligibilityCriteria,
        SectionId::Results,
        SectionId::Interventions,
    ];

    /// Spelling used in data files.
    pub fn key(self) -> &'static str {
        match self {
            SectionId::AdverseEvents => "Adverse Events",
            SectionId::EligibilityCriteria => "Eligibility",
            SectionId::Results => "Results",
            SectionId::Interventions => "Intervention",
        }
    }
}

impl fmt::Display for SectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleType {
    Single,
    Comparison,
}

impl fmt::Display for SampleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleType::Single => "Single",
            SampleType::Comparison => "Comparison",
        })
    }
}

/// One NLI instance: a statement about one or two trial reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub statement: String,
    pub kind: SampleType,
    pub section: SectionId,
    pub primary_trial: String,
    pub secondary_trial: Option<String>,
    pub gold: Option<Label>,
}

/// On-disk shape of a sample entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    #[serde(rename = "Type")]
    kind: SampleType,
    #[serde(rename = "Section_id")]
    section: SectionId,
    #[serde(rename = "Primary_id")]
    primary_id: String,
    #[serde(
        rename = "Secondary_id",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    secondary_id: Option<String>,
    #[serde(rename = "Statement")]
    statement: String,
    #[serde(rename = "Label", default, skip_serializing_if = "Option::is_none")]
    label: Option<Label>,
}

impl Sample {
    fn from_record(id: String, rec: SampleRecord) -> Result<Sample> {
        let malformed = |reason: &str| CorpusError::MalformedRecord {
            id: id.clone(),
            reason: reason.to_string(),
        };
        if rec.statement.trim().is_empty() {
            return Err(malformed("empty statement"));
        }
        if rec.primary_id.trim().is_empty() {
            return Err(malformed("empty Primary_id"));
        }
        match (rec.kind, &rec.secondary_id) {
            (SampleType::Comparison, None) => {
                return Err(malformed("Comparison sample without Secondary_id"))
            }
            (SampleType::Single, Some(_)) => {
                return Err(malformed("Single sample with a Secondary_id"))
            }
            _ => {}
        }
        Ok(Sample {
            id,
            statement: rec.statement,
            kind: rec.kind,
            section: rec.section,
            primary_trial: rec.primary_id,
            secondary_trial: rec.secondary_id,
            gold: rec.label,
        })
    }

    fn to_record(&self) -> SampleRecord {
        SampleRecord {
            kind: self.kind,
            section: self.section,
            primary_id: self.primary_trial.clone(),
            secondary_id: self.secondary_trial.clone(),
            statement: self.statement.clone(),
            label: self.gold,
        }
    }

    /// Trial ids this sample needs, primary first.
    pub fn trial_ids(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.primary_trial.as_str()).chain(self.secondary_trial.as_deref())
    }
}

/// Object entries in document order, keeping duplicates so they can be reported.
struct OrderedEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = OrderedEntries;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object keyed by sample id")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::with_capacity(map.size_hint().unwrap_or(0));
                while let Some(key) = map.next_key::<String>()? {
                    out.push((key, map.next_value::<Value>()?));
                }
                Ok(OrderedEntries(out))
            }
        }
        d.deserialize_map(EntriesVisitor)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> CorpusError + '_ {
    move |source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// Parse a samples document. Iteration order of the result is id-sorted.
pub fn parse_samples(text: &str, path: &Path) -> Result<BTreeMap<String, Sample>> {
    let mut de = serde_json::Deserializer::from_str(text);
    let entries = OrderedEntries::deserialize(&mut de).map_err(json_err(path))?;
    de.end().map_err(json_err(path))?;

    let mut out = BTreeMap::new();
    for (id, value) in entries.0 {
        if out.contains_key(&id) {
            return Err(CorpusError::DuplicateId(id));
        }
        let rec: SampleRecord =
            serde_json::from_value(value).map_err(|e| CorpusError::MalformedRecord {
                id: id.clone(),
                reason: e.to_string(),
            })?;
        let sample = Sample::from_record(id.clone(), rec)?;
        out.insert(id, sample);
    }
    Ok(out)
}

pub fn load_samples(path: &Path) -> Result<BTreeMap<String, Sample>> {
    parse_samples(&read(path)?, path)
}

/// Inverse of [`parse_samples`] on validated input.
pub fn samples_to_json<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> String {
    let map: BTreeMap<&str, SampleRecord> = samples
        .into_iter()
        .map(|s| (s.id.as_str(), s.to_record()))
        .collect();
    serde_json::to_string_pretty(&map).expect("sample records always serialize")
}

/// A clinical trial report. Every [`SectionId`] has an entry, possibly empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClinicalTrial {
    pub id: String,
    pub sections: BTreeMap<SectionId, Vec<String>>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct TrialRecord {
    #[serde(rename = "Clinical Trial ID")]
    id: String,
    #[serde(rename = "Intervention", default)]
    intervention: Vec<String>,
    #[serde(rename = "Eligibility", default)]
    eligibility: Vec<String>,
    #[serde(rename = "Results", default)]
    results: Vec<String>,
    #[serde(rename = "Adverse Events", default)]
    adverse_events: Vec<String>,
}

impl ClinicalTrial {
    /// Builds a trial, checking that no line contains a newline or already
    /// carries a cohort suffix.
    pub fn new(
        id: impl Into<String>,
        sections: impl IntoIterator<Item = (SectionId, Vec<String>)>,
    ) -> Result<ClinicalTrial> {
        let id = id.into();
        let mut map: BTreeMap<SectionId, Vec<String>> = SectionId::ALL
            .into_iter()
            .map(|s| (s, Vec::new()))
            .collect();
        for (section, lines) in sections {
            for line in &lines {
                if line.contains('\n') || line.contains('\r') {
                    return Err(CorpusError::MalformedRecord {
                        id,
                        reason: format!("{section} line contains a newline"),
                    });
                }
                if line.contains(COHORT_MARKER) {
                    return Err(CorpusError::MalformedRecord {
                        id,
                        reason: format!("{section} line is already cohort-annotated: {line:?}"),
                    });
                }
            }
            map.insert(section, lines);
        }
        Ok(ClinicalTrial { id, sections: map })
    }

    pub fn section(&self, section: SectionId) -> &[String] {
        self.sections
            .get(&section)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn to_json(&self) -> String {
        let rec = TrialRecord {
            id: self.id.clone(),
            intervention: self.section(SectionId::Interventions).to_vec(),
            eligibility: self.section(SectionId::EligibilityCriteria).to_vec(),
            results: self.section(SectionId::Results).to_vec(),
            adverse_events: self.section(SectionId::AdverseEvents).to_vec(),
        };
        serde_json::to_string_pretty(&rec).expect("trial records always serialize")
    }
}

pub fn parse_trial(text: &str, path: &Path) -> Result<ClinicalTrial> {
    let rec: TrialRecord = serde_json::from_str(text).map_err(json_err(path))?;
    ClinicalTrial::new(
        rec.id,
        [
            (SectionId::Interventions, rec.intervention),
            (SectionId::EligibilityCriteria, rec.eligibility),
            (SectionId::Results, rec.results),
            (SectionId::AdverseEvents, rec.adverse_events),
        ],
    )
}

pub fn load_trial(path: &Path) -> Result<ClinicalTrial> {
    parse_trial(&read(path)?, path)
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry
            .map_err(|source| CorpusError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub type TrialIndex = BTreeMap<String, ClinicalTrial>;

pub fn load_trials_dir(dir: &Path) -> Result<TrialIndex> {
    let mut out = TrialIndex::new();
    for path in json_files(dir)? {
        let trial = load_trial(&path)?;
        if out.contains_key(&trial.id) {
            return Err(CorpusError::DuplicateId(trial.id));
        }
        out.insert(trial.id.clone(), trial);
    }
    Ok(out)
}

const COHORT_MARKER: &str = " (Cohort";

/// How cohort subtitle lines are recognised inside a report section.
#[derive(Debug, Clone)]
pub enum SubtitleRule {
    /// Line ends with ':' (ignoring trailing whitespace) and has at most `max_words` words.
    Heuristic {
        max_words: usize,
    },
    Pattern(Regex),
}

impl Default for SubtitleRule {
    fn default() -> Self {
        SubtitleRule::Heuristic { max_words: 8 }
    }
}

impl SubtitleRule {
    pub fn pattern(re: &str) -> Result<SubtitleRule> {
        Ok(SubtitleRule::Pattern(Regex::new(re)?))
    }

    pub fn is_subtitle(&self, line: &str) -> bool {
        match self {
            SubtitleRule::Heuristic { max_words } => {
                let t = line.trim_end();
                t.ends_with(':') && t.split_whitespace().count() <= *max_words
            }
            SubtitleRule::Pattern(re) => re.is_match(line),
        }
    }
}

/// Renders report sections into prompt text, numbering cohort subtitles.
#[derive(Debug, Clone, Default)]
pub struct Renderer {
    pub subtitles: SubtitleRule,
}

impl Renderer {
    pub fn new(subtitles: SubtitleRule) -> Self {
        Renderer { subtitles }
    }

    /// Joins lines with '\n'; the k-th subtitle line gets " (Cohort k)" appended.
    pub fn render_section(&self, trial: &ClinicalTrial, section: SectionId) -> String {
        let mut cohort = 0usize;
        let mut out = String::new();
        for (i, line) in trial.section(section).iter().enumerate() {
            debug_assert!(!line.contains(COHORT_MARKER), "section rendered twice");
            if i > 0 {
                out.push('\n');
            }
            if self.subtitles.is_subtitle(line) {
                cohort += 1;
                out.push_str(line.trim_end());
                out.push_str(&format!("{COHORT_MARKER} {cohort})"));
            } else {
                out.push_str(line);
            }
        }
        out
    }

    pub fn render_evidence(&self, sample: &Sample, trials: &TrialIndex) -> Result<String> {
        let get = |id: &str| {
            trials.get(id).ok_or_else(|| CorpusError::MissingTrial {
                sample_id: sample.id.clone(),
                trial_id: id.to_string(),
            })
        };
        let primary = self.render_section(get(&sample.primary_trial)?, sample.section);
        match (&sample.kind, &sample.secondary_trial) {
            (SampleType::Comparison, Some(secondary)) => {
                let secondary = self.render_section(get(secondary)?, sample.section);
                Ok(format!(
                    "Primary Trial:\n{primary}\nSecondary Trial:\n{secondary}"
                ))
            }
            _ => Ok(primary),
        }
    }
}

pub fn render_section(trial: &ClinicalTrial, section: SectionId) -> String {
    Renderer::default().render_section(trial, section)
}

pub fn render_evidence(sample: &Sample, trials: &TrialIndex) -> Result<String> {
    Renderer::default().render_evidence(sample, trials)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastKind {
    SemanticPreserving,
    SemanticAltering,
}

/// A contrast statement linked to the original statement it perturbs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastPair {
    pub contrast_id: String,
    pub original_id: String,
    pub kind: ContrastKind,
}

/// Parse a links document and check it against `samples`. Result is sorted.
pub fn parse_contrast_links(
    text: &str,
    path: &Path,
    samples: &BTreeMap<String, Sample>,
) -> Result<Vec<ContrastPair>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut links: Vec<ContrastPair> = serde_json::from_str(text).map_err(json_err(path))?;
    for link in &links {
        let contrast = samples
            .get(&link.contrast_id)
            .ok_or_else(|| CorpusError::DanglingReference(link.contrast_id.clone()))?;
        let original = samples
            .get(&link.original_id)
            .ok_or_else(|| CorpusError::DanglingReference(link.original_id.clone()))?;
        if let (Some(a), Some(b)) = (contrast.gold, original.gold) {
            let consistent = match link.kind {
                ContrastKind::SemanticPreserving => a == b,
                ContrastKind::SemanticAltering => a != b,
            };
            if !consistent {
                return Err(CorpusError::KindLabelMismatch {
                    contrast_id: link.contrast_id.clone(),
                    original_id: link.original_id.clone(),
                });
            }
        }
    }
    links.sort();
    Ok(links)
}

pub fn load_contrast_links(
    path: &Path,
    samples: &BTreeMap<String, Sample>,
) -> Result<Vec<ContrastPair>> {
    parse_contrast_links(&read(path)?, path, samples)
}

/// Everything under one data directory, validated and cross-resolved.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    /// Split name (file stem) to its samples.
    pub splits: BTreeMap<String, BTreeMap<String, Sample>>,
    pub trials: TrialIndex,
    pub links: Vec<ContrastPair>,
}

/// Per-file outcome of [`Corpus::validate_dir`].
#[derive(Debug, Default)]
pub struct ValidationReport {
    pub files_checked: Vec<PathBuf>,
    pub errors: Vec<(PathBuf, CorpusError)>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty() && !self.files_checked.is_empty()
    }
}

fn trials_dir(data_dir: &Path) -> PathBuf {
    let release = data_dir.join(TRIALS_DIR_RELEASE);
    if !data_dir.join(TRIALS_DIR).is_dir() && release.is_dir() {
        release
    } else {
        data_dir.join(TRIALS_DIR)
    }
}

fn sample_files(data_dir: &Path) -> Result<Vec<PathBuf>> {
    if !data_dir.is_dir() {
        return Err(CorpusError::NoSampleFiles(data_dir.to_path_buf()));
    }
    let files: Vec<PathBuf> = json_files(data_dir)?
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n != CONTRAST_LINKS_FILE))
        .collect();
    if files.is_empty() {
        return Err(CorpusError::NoSampleFiles(data_dir.to_path_buf()));
    }
    Ok(files)
}

fn split_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

impl Corpus {
    /// Loads and cross-checks a data directory, failing on the first problem.
    pub fn load_dir(data_dir: &Path) -> Result<Corpus> {
        let mut corpus = Corpus::default();
        let mut seen = BTreeSet::new();
        for path in sample_files(data_dir)? {
            let samples = load_samples(&path)?;
            for id in samples.keys() {
                if !seen.insert(id.clone()) {
                    return Err(CorpusError::DuplicateId(id.clone()));
                }
            }
            corpus.splits.insert(split_name(&path), samples);
        }
        corpus.trials = load_trials_dir(&trials_dir(data_dir))?;
        if let Some(err) = corpus.unresolved_trials().into_iter().next() {
            return Err(err);
        }
        let links_path = data_dir.join(CONTRAST_LINKS_FILE);
        if links_path.is_file() {
            corpus.links = load_contrast_links(&links_path, &corpus.all_samples())?;
        }
        Ok(corpus)
    }

    /// Loads everything it can and reports every problem found, grouped by file.
    pub fn validate_dir(data_dir: &Path) -> ValidationReport {
        let mut report = ValidationReport::default();
        let files = match sample_files(data_dir) {
            Ok(f) => f,
            Err(e) => {
                report.errors.push((data_dir.to_path_buf(), e));
                return report;
            }
        };
        let mut corpus = Corpus::default();
        let mut seen = BTreeSet::new();
        for path in files {
            report.files_checked.push(path.clone());
            match load_samples(&path) {
                Ok(samples) => {
                    for id in samples.keys() {
                        if !seen.insert(id.clone()) {
                            report
                                .errors
                                .push((path.clone(), CorpusError::DuplicateId(id.clone())));
                        }
                    }
                    corpus.splits.insert(split_name(&path), samples);
                }
                Err(e) => report.errors.push((path, e)),
            }
        }
        let tdir = trials_dir(data_dir);
        match json_files(&tdir) {
            Ok(paths) => {
                for path in paths {
                    report.files_checked.push(path.clone());
                    match load_trial(&path) {
                        Ok(t) if corpus.trials.contains_key(&t.id) => {
                            report.errors.push((path, CorpusError::DuplicateId(t.id)))
                        }
                        Ok(t) => {
                            corpus.trials.insert(t.id.clone(), t);
                        }
                        Err(e) => report.errors.push((path, e)),
                    }
                }
            }
            Err(e) => report.errors.push((tdir.clone(), e)),
        }
        for err in corpus.unresolved_trials() {
            report.errors.push((tdir.clone(), err));
        }
        let links_path = data_dir.join(CONTRAST_LINKS_FILE);
        if links_path.is_file() {
            report.files_checked.push(links_path.clone());
            if let Err(e) = load_contrast_links(&links_path, &corpus.all_samples()) {
                report.errors.push((links_path, e));
            }
        }
        report
    }

    fn unresolved_trials(&self) -> Vec<CorpusError> {
        self.splits
            .values()
            .flat_map(BTreeMap::values)
            .flat_map(|s| {
                s.trial_ids()
                    .filter(|t| !self.trials.contains_key(*t))
                    .map(|t| CorpusError::MissingTrial {
                        sample_id: s.id.clone(),
                        trial_id: t.to_string(),
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Union of all splits, id-sorted.
    pub fn all_samples(&self) -> BTreeMap<String, Sample> {
        self.splits
            .values()
            .flat_map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }

    pub fn split(&self, name: &str) -> Result<&BTreeMap<String, Sample>> {
        self.splits
            .get(name)
            .ok_or_else(|| CorpusError::UnknownSplit(name.to_string()))
    }

    /// Gold labels of every sample that has one.
    pub fn gold_labels(&self) -> BTreeMap<String, Label> {
        self.splits
            .values()
            .flat_map(BTreeMap::values)
            .filter_map(|s| s.gold.map(|g| (s.id.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(lines: &[&str]) -> ClinicalTrial {
        ClinicalTrial::new(
            "NCT0",
            [(
                SectionId::AdverseEvents,
                lines.iter().map(|s| s.to_string()).collect(),
            )],
        )
        .unwrap()
    }

    const ONE_SINGLE: &str = r#"{"a1": {"Type": "Single", "Section_id": "Results",
        "Primary_id": "NCT1", "Statement": "x is y", "Label": "Entailment"}}"#;

    #[test]
    fn one_valid_single_record() {
        let m = parse_samples(ONE_SINGLE, Path::new("t.json")).unwrap();
        assert_eq!(m.len(), 1);
        let s = &m["a1"];
        assert_eq!(s.kind, SampleType::Single);
        assert_eq!(s.gold, Some(Label::Entailment));
        assert_eq!(s.secondary_trial, None);
    }

    #[test]
    fn comparison_without_secondary_is_malformed() {
        let text = r#"{"b": {"Type": "Comparison", "Section_id": "Results",
            "Primary_id": "NCT1", "Statement": "s"}}"#;
        let err = parse_samples(text, Path::new("t.json")).unwrap_err();
        assert!(
            matches!(err, CorpusError::MalformedRecord { ref id, .. } if id == "b"),
            "{err}"
        );
    }

    #[test]
    fn unknown_field_and_empty_statement_rejected() {
        let text = r#"{"b": {"Type": "Single", "Section_id": "Results",
            "Primary_id": "NCT1", "Statement": "s", "Extra": 1}}"#;
        assert!(matches!(
            parse_samples(text, Path::new("t")),
            Err(CorpusError::MalformedRecord { .. })
        ));
        let text = r#"{"b": {"Type": "Single", "Section_id": "Results",
            "Primary_id": "NCT1", "Statement": "  "}}"#;
        assert!(matches!(
            parse_samples(text, Path::new("t")),
            Err(CorpusError::MalformedRecord { .. })
        ));
    }

    #[test]
    fn duplicate_keys_detected() {
        let rec =
            r#"{"Type": "Single", "Section_id": "Results", "Primary_id": "N", "Statement": "s"}"#;
        let text = format!(r#"{{"a": {rec}, "a": {rec}}}"#);
        assert!(matches!(
            parse_samples(&text, Path::new("t")),
            Err(CorpusError::DuplicateId(id)) if id == "a"
        ));
    }

    #[test]
    fn plain_line_renders_unchanged() {
        assert_eq!(
            render_section(&trial(&["No adverse events."]), SectionId::AdverseEvents),
            "No adverse events."
        );
    }

    #[test]
    fn cohort_subtitles_are_numbered() {
        let t = trial(&["Cohort A:", "x", "Cohort B:", "y"]);
        assert_eq!(
            render_section(&t, SectionId::AdverseEvents),
            "Cohort A: (Cohort 1)\nx\nCohort B: (Cohort 2)\ny"
        );
    }

    #[test]
    fn empty_section_renders_empty() {
        assert_eq!(render_section(&trial(&[]), SectionId::AdverseEvents), "");
        assert_eq!(render_section(&trial(&["a"]), SectionId::Results), "");
    }

    #[test]
    fn long_colon_lines_are_not_subtitles() {
        let t = trial(&["one two three four five six seven eight nine:"]);
        assert_eq!(
            render_section(&t, SectionId::AdverseEvents),
            "one two three four five six seven eight nine:"
        );
    }

    #[test]
    fn regex_override() {
        let r = Renderer::new(SubtitleRule::pattern(r"^Arm\b").unwrap());
        let t = trial(&["Arm 1", "Cohort A:", "Arm 2"]);
        assert_eq!(
            r.render_section(&t, SectionId::AdverseEvents),
            "Arm 1 (Cohort 1)\nCohort A:\nArm 2 (Cohort 2)"
        );
    }

    #[test]
    fn pre_annotated_lines_rejected() {
        let err = ClinicalTrial::new(
            "N",
            [(SectionId::Results, vec!["Cohort A: (Cohort 1)".to_string()])],
        );
        assert!(err.is_err());
        let err = ClinicalTrial::new("N", [(SectionId::Results, vec!["a\nb".to_string()])]);
        assert!(err.is_err());
    }

    fn samples(json: &str) -> BTreeMap<String, Sample> {
        parse_samples(json, Path::new("s")).unwrap()
    }

    const PAIR: &str = r#"{
        "o": {"Type": "Single", "Section_id": "Results", "Primary_id": "N", "Statement": "s", "Label": "Entailment"},
        "c": {"Type": "Single", "Section_id": "Results", "Primary_id": "N", "Statement": "t", "Label": "Entailment"}
    }"#;

    #[test]
    fn preserving_link_with_shared_label_accepted() {
        let links = parse_contrast_links(
            r#"[{"contrast_id": "c", "original_id": "o", "kind": "semantic_preserving"}]"#,
            Path::new("l"),
            &samples(PAIR),
        )
        .unwrap();
        assert_eq!(links.len(), 1);
        assert_eq!(links[0].kind, ContrastKind::SemanticPreserving);
    }

    #[test]
    fn altering_link_with_shared_label_rejected() {
        let err = parse_contrast_links(
            r#"[{"contrast_id": "c", "original_id": "o", "kind": "semantic_altering"}]"#,
            Path::new("l"),
            &samples(PAIR),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::KindLabelMismatch { .. }));
    }

    #[test]
    fn dangling_link_and_empty_file() {
        let err = parse_contrast_links(
            r#"[{"contrast_id": "zz", "original_id": "o", "kind": "semantic_altering"}]"#,
            Path::new("l"),
            &samples(PAIR),
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::DanglingReference(id) if id == "zz"));
        assert!(parse_contrast_links("", Path::new("l"), &samples(PAIR))
            .unwrap()
            .is_empty());
        assert!(parse_contrast_links("[]", Path::new("l"), &samples(PAIR))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn label_encoding() {
        assert_eq!(Label::Entailment.as_bit(), 1);
        assert_eq!(Label::Contradiction.as_bit(), 0);
        assert_eq!(
            Label::parse_loose(" contradiction "),
            Some(Label::Contradiction)
        );
        assert_eq!(Label::parse_loose("maybe"), None);
    }
}
