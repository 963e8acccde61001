//! Base F1, faithfulness and consistency.
//!
//! With f(.) the 0/1 prediction (Entailment = 1), x a contrast statement and
//! y its original:
//!
//! * faithfulness = mean |f(y) - f(x)| over semantic-altering pairs whose
//!   original was predicted correctly;
//! * consistency = mean (1 - |f(y) - f(x)|) over semantic-preserving pairs,
//!   with no correctness condition.
//!
//! Either is `None` when no pair is eligible.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ContrastKind, ContrastPair, Label};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no gold label for predicted sample {0}")]
    MissingGold(String),
    #[error("contrast link references {0}, which has no prediction or gold label")]
    DanglingReference(String),
}

pub type Labels = BTreeMap<String, Label>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// Counts with `positive` as the positive class.
    pub fn tally(
        preds: &Labels,
        gold: &Labels,
        positive: Label,
    ) -> Result<Confusion, MetricsError> {
        let mut c = Confusion::default();
        for (id, &p) in preds {
            let g = *gold
                .get(id)
                .ok_or_else(|| MetricsError::MissingGold(id.clone()))?;
            match (p == positive, g == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// 2tp / (2tp + fp + fn), or 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Mode {
    /// Binary F1 with Entailment as the positive class.
    #[default]
    EntailmentPositive,
    /// Unweighted mean of the per-class F1 scores.
    Macro,
}

pub fn f1(preds: &Labels, gold: &Labels) -> Result<f64, MetricsError> {
    Ok(Confusion::tally(preds, gold, Label::Entailment)?.f1())
}

pub fn f1_with(preds: &Labels, gold: &Labels, mode: F1Mode) -> Result<f64, MetricsError> {
    match mode {
        F1Mode::EntailmentPositive => f1(preds, gold),
        F1Mode::Macro => {
            let e = Confusion::tally(preds, gold, Label::Entailment)?.f1();
            let c = Confusion::tally(preds, gold, Label::Contradiction)?.f1();
            Ok((e + c) / 2.0)
        }
    }
}

/// An exact ratio `hits / total` with `total > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rate {
    pub hits: u64,
    pub total: u64,
}

impl Rate {
    pub fn value(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

fn lookup<'a>(map: &'a Labels, id: &str) -> Result<&'a Label, MetricsError> {
    map.get(id)
        .ok_or_else(|| MetricsError::DanglingReference(id.to_string()))
}

/// Per pair: (contrast pred, original pred, original gold).
fn resolved(
    preds: &Labels,
    gold: &Labels,
    links: &[ContrastPair],
    kind: ContrastKind,
) -> Result<Vec<(Label, Label, Label)>, MetricsError> {
    links
        .iter()
        .filter(|l| l.kind == kind)
        .map(|l| {
            lookup(gold, &l.contrast_id)?;
            Ok((
                *lookup(preds, &l.contrast_id)?,
                *lookup(preds, &l.original_id)?,
                *lookup(gold, &l.original_id)?,
            ))
        })
        .collect()
}

fn abs_diff(a: Label, b: Label) -> u64 {
    a.as_bit().abs_diff(b.as_bit()) as u64
}

pub fn faithfulness_rate(
    preds: &Labels,
    gold: &Labels,
    links: &[ContrastPair],
) -> Result<Option<Rate>, MetricsError> {
    let mut rate = Rate { hits: 0, total: 0 };
    for (fx, fy, gy) in resolved(preds, gold, links, ContrastKind::SemanticAltering)? {
        if fy == gy {
            rate.total += 1;
            rate.hits += abs_diff(fy, fx);
        }
    }
    Ok((rate.total > 0).then_some(rate))
}

pub fn consistency_rate(
    preds: &Labels,
    gold: &Labels,
    links: &[ContrastPair],
) -> Result<Option<Rate>, MetricsError> {
    let mut rate = Rate { hits: 0, total: 0 };
    for (fx, fy, _) in resolved(preds, gold, links, ContrastKind::SemanticPreserving)? {
        rate.total += 1;
        rate.hits += 1 - abs_diff(fy, fx);
    }
    Ok((rate.total > 0).then_some(rate))
}

pub fn faithfulness(
    preds: &Labels,
    gold: &Labels,
    links: &[ContrastPair],
) -> Result<Option<f64>, MetricsError> {
    Ok(faithfulness_rate(preds, gold, links)?.map(|r| r.value()))
}

pub fn consistency(
    preds: &Labels,
    gold: &Labels,
    links: &[ContrastPair],
) -> Result<Option<f64>, MetricsError> {
    Ok(consistency_rate(preds, gold, links)?.map(|r| r.value()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub n_faithfulness_pairs: u64,
    pub n_consistency_pairs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1_mode: F1Mode,
    pub f1: f64,
    pub faithfulness: Option<f64>,
    pub consistency: Option<f64>,
    pub counts: MetricCounts,
}

impl MetricsReport {
    pub fn evaluate(
        preds: &Labels,
        gold: &Labels,
        links: &[ContrastPair],
        mode: F1Mode,
    ) -> Result<MetricsReport, MetricsError> {
        let c = Confusion::tally(preds, gold, Label::Entailment)?;
        let faith = faithfulness_rate(preds, gold, links)?;
        let cons = consistency_rate(preds, gold, links)?;
        Ok(MetricsReport {
            f1_mode: mode,
            f1: f1_with(preds, gold, mode)?,
            faithfulness: faith.map(|r| r.value()),
            consistency: cons.map(|r| r.value()),
            counts: MetricCounts {
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                tn: c.tn,
                n_faithfulness_pairs: faith.map_or(0, |r| r.total),
                n_consistency_pairs: cons.map_or(0, |r| r.total),
            },
        })
    }

    /// Aligned text table: Run | Base F1 | Consistency | Faithfulness.
    pub fn to_table(&self, run_name: &str) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let rows = [
            ["Run", "Base F1", "Consistency", "Faithfulness"].map(String::from),
            [
                run_name.to_string(),
                format!("{:.4}", self.f1),
                cell(self.consistency),
                cell(self.faithfulness),
            ],
        ];
        let widths: Vec<usize> = (0..4)
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (n, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  "));
            if n == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "{}", rule.join("  "));
            }
        }
        let c = &self.counts;
        let _ = writeln!(
            out,
            "\ntp={} fp={} fn={} tn={}  faithfulness pairs={}  consistency pairs={}",
            c.tp, c.fp, c.fn_, c.tn, c.n_faithfulness_pairs, c.n_consistency_pairs
        );
        out
    }
}
