//! Data-directory and endpoint fixtures for the CLI tests.
#![allow(dead_code)]

#[path = "../../../core/tests/common/mod.rs"]
pub mod core;

use std::path::{Path, PathBuf};

use trialnli::corpus::samples_to_json;
use trialnli::{ContrastKind, ContrastPair, Label, Sample, SectionId};

pub use self::core::{answer, comparison, completion, single, trial, MockServer};

/// Answers reasoning prompts with prose and formatting prompts with a label
/// chosen by statement parity.
pub fn cot_server() -> MockServer {
    MockServer::start(|req| {
        let body = req.json();
        let text = body["messages"][0]["content"]
            .as_str()
            .unwrap_or("")
            .to_string();
        let stmt = text
            .lines()
            .find_map(|l| l.strip_prefix("Statement: "))
            .unwrap_or("")
            .to_string();
        let reply = if text.contains("Reasoning:") {
            let label = if stmt.len() % 2 == 0 {
                Label::Entailment
            } else {
                Label::Contradiction
            };
            answer(label)
        } else {
            format!("The report is consistent with: {stmt}")
        };
        (200, completion(&reply))
    })
}

pub fn dev_samples() -> Vec<Sample> {
    vec![
        single(
            "d1",
            "Drug A is given daily.",
            SectionId::Interventions,
            Some(Label::Entailment),
        ),
        single(
            "d2",
            "Drug A is given daily!",
            SectionId::Interventions,
            Some(Label::Entailment),
        ),
        single(
            "d3",
            "Children are eligible.",
            SectionId::EligibilityCriteria,
            Some(Label::Contradiction),
        ),
        comparison(
            "d4",
            "Both trials saw nausea.",
            SectionId::AdverseEvents,
            Some(Label::Entailment),
        ),
    ]
}

pub fn dev_links() -> Vec<ContrastPair> {
    vec![
        ContrastPair {
            contrast_id: "d2".into(),
            original_id: "d1".into(),
            kind: ContrastKind::SemanticPreserving,
        },
        ContrastPair {
            contrast_id: "d3".into(),
            original_id: "d1".into(),
            kind: ContrastKind::SemanticAltering,
        },
    ]
}

/// Writes `<dir>/<split>.json`, `<dir>/trials/*.json` and the links file.
pub fn write_corpus(
    dir: &Path,
    split: &str,
    samples: &[Sample],
    links: &[ContrastPair],
) -> PathBuf {
    std::fs::create_dir_all(dir.join("trials")).unwrap();
    std::fs::write(dir.join(format!("{split}.json")), samples_to_json(samples)).unwrap();
    for id in ["NCT0001", "NCT0002"] {
        std::fs::write(
            dir.join("trials").join(format!("{id}.json")),
            trial(id).to_json(),
        )
        .unwrap();
    }
    if !links.is_empty() {
        std::fs::write(
            dir.join("contrast_links.json"),
            serde_json::to_string_pretty(links).unwrap(),
        )
        .unwrap();
    }
    dir.to_path_buf()
}
