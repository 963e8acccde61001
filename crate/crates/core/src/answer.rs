//! Label extraction from raw model output.
//!
//! Rules, first match wins:
//! 1. the whole reply is a JSON object with an `"answer"` label → [`ParseStatus::CleanJson`]
//! 2. the first balanced `{...}` that parses and carries such a key → [`ParseStatus::RecoveredJson`]
//! 3. exactly one of the two label words appears → [`ParseStatus::RecoveredJson`] (can be disabled)
//! 4. otherwise [`Label::Contradiction`] with [`ParseStatus::Fallback`]
//!
//! Label values and the `answer` key are matched case-insensitively.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseStatus {
    CleanJson,
    RecoveredJson,
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub label: Label,
    pub status: ParseStatus,
}

impl ParsedAnswer {
    pub const FALLBACK: ParsedAnswer = ParsedAnswer {
        label: Label::Contradiction,
        status: ParseStatus::Fallback,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOptions {
    /// Rule 3. Off reproduces the strict JSON-or-fallback behaviour.
    pub keyword_rescue: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            keyword_rescue: true,
        }
    }
}

pub fn parse_label(raw: &str) -> ParsedAnswer {
    parse_label_with(raw, ParseOptions::default())
}

/// Lossy UTF-8 decoding, then [`parse_label_with`].
pub fn parse_label_bytes(raw: &[u8], opts: ParseOptions) -> ParsedAnswer {
    parse_label_with(&String::from_utf8_lossy(raw), opts)
}

pub fn parse_label_with(raw: &str, opts: ParseOptions) -> ParsedAnswer {
    if let Some(label) = serde_json::from_str::<Value>(raw.trim())
        .ok()
        .as_ref()
        .and_then(answer_field)
    {
        return ParsedAnswer {
            label,
            status: ParseStatus::CleanJson,
        };
    }
    if let Some(label) = first_embedded_answer(raw) {
        return ParsedAnswer {
            label,
            status: ParseStatus::RecoveredJson,
        };
    }
    if opts.keyword_rescue {
        if let Some(label) = sole_keyword(raw) {
            return ParsedAnswer {
                label,
                status: ParseStatus::RecoveredJson,
            };
        }
    }
    ParsedAnswer::FALLBACK
}

fn answer_field(v: &Value) -> Option<Label> {
    v.as_object()?
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case("answer"))
        .and_then(|(_, v)| v.as_str())
        .and_then(Label::parse_loose)
}

fn first_embedded_answer(raw: &str) -> Option<Label> {
    raw.match_indices('{').find_map(|(start, _)| {
        let end = balanced_end(&raw[start..])?;
        let v: Value = serde_json::from_str(&raw[start..start + end]).ok()?;
        answer_field(&v)
    })
}

/// Byte length of the balanced `{...}` starting at `s[0]`, string-literal aware.
fn balanced_end(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in s.bytes().enumerate() {
        if in_string {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn sole_keyword(raw: &str) -> Option<Label> {
    static WORDS: OnceLock<(Regex, Regex)> = OnceLock::new();
    let (ent, con) = WORDS.get_or_init(|| {
        (
            Regex::new(r"(?i)\bentailment\b").unwrap(),
            Regex::new(r"(?i)\bcontradiction\b").unwrap(),
        )
    });
    match (ent.is_match(raw), con.is_match(raw)) {
        (true, false) => Some(Label::Entailment),
        (false, true) => Some(Label::Contradiction),
        _ => None,
    }
}
