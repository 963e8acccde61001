use std::collections::BTreeMap;
use std::path::Path;

use proptest::prelude::*;
use trialnli::corpus::{parse_samples, samples_to_json};
use trialnli::exemplars::{select_exemplar, squared_l2};
use trialnli::metrics::{consistency, f1, faithfulness, Labels};
use trialnli::opro::update_pool;
use trialnli::{
    parse_label, ContrastKind, ContrastPair, Embedding, Exemplar, ExemplarStore, Instruction,
    InstructionPool, Label, ParseStatus, Sample, SampleType, SectionId, SelectionOptions,
    TierPriority,
};

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Entailment), Just(Label::Contradiction)]
}

fn section() -> impl Strategy<Value = SectionId> {
    prop::sample::select(SectionId::ALL.to_vec())
}

fn kind() -> impl Strategy<Value = SampleType> {
    prop_oneof![Just(SampleType::Single), Just(SampleType::Comparison)]
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, dim)
}

/// Predictions, gold labels and kind-consistent links over `n` originals.
fn contrast_instance() -> impl Strategy<Value = (Labels, Labels, Vec<ContrastPair>)> {
    prop::collection::vec((label(), label(), label(), any::<bool>()), 1..20).prop_map(|rows| {
        let mut preds = Labels::new();
        let mut gold = Labels::new();
        let mut links = Vec::new();
        for (i, (g, py, px, alter)) in rows.into_iter().enumerate() {
            let (y, x) = (format!("o{i}"), format!("c{i}"));
            gold.insert(y.clone(), g);
            gold.insert(x.clone(), if alter { g.flipped() } else { g });
            preds.insert(y.clone(), py);
            preds.insert(x.clone(), px);
            links.push(ContrastPair {
                contrast_id: x,
                original_id: y,
                kind: if alter {
                    ContrastKind::SemanticAltering
                } else {
                    ContrastKind::SemanticPreserving
                },
            });
        }
        (preds, gold, links)
    })
}

fn flip_all(m: &Labels) -> Labels {
    m.iter().map(|(k, v)| (k.clone(), v.flipped())).collect()
}

proptest! {
    #[test]
    fn parse_is_total_on_arbitrary_text(s in ".*") {
        let a = parse_label(&s);
        let lower = s.to_lowercase();
        if !lower.contains("entailment") && !lower.contains("contradiction") {
            prop_assert_eq!(a.label, Label::Contradiction);
            prop_assert_eq!(a.status, ParseStatus::Fallback);
        }
    }

    #[test]
    fn answer_object_survives_brace_free_wrapping(
        l in label(),
        pre in "[^{}]{0,40}",
        post in "[^{}]{0,40}",
    ) {
        let reply = format!("{pre}{{\"answer\": \"{l}\"}}{post}");
        let a = parse_label(&reply);
        prop_assert_eq!(a.label, l);
        prop_assert_ne!(a.status, ParseStatus::Fallback);
    }

    #[test]
    fn squared_l2_is_a_symmetric_sum_of_squares(
        (a, b) in (1usize..32).prop_flat_map(|d| (vector(d), vector(d)))
    ) {
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        let ea = Embedding::new(a).unwrap();
        let eb = Embedding::new(b).unwrap();
        let d = squared_l2(&ea, &eb).unwrap();
        prop_assert_eq!(d, squared_l2(&eb, &ea).unwrap());
        prop_assert!(d >= 0.0);
        prop_assert!((d - naive).abs() <= 1e-9 * naive.max(1.0));
        prop_assert_eq!(squared_l2(&ea, &ea).unwrap(), 0.0);
    }

    #[test]
    fn selection_ignores_store_order(
        rows in prop::collection::vec((vector(4), kind(), section(), 0u8..3), 1..20),
        q in vector(4),
        qkind in kind(),
        qsection in section(),
        type_first in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let exemplars: Vec<Exemplar> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (v, k, s, stmt))| Exemplar {
                sample_id: format!("e{i:02}"),
                statement: format!("claim {stmt}"),
                embedding: Embedding::new(v).unwrap(),
                reasoning: "r".into(),
                label: Label::Entailment,
                kind: k,
                section: s,
            })
            .collect();
        let query = Sample {
            id: "q".into(),
            statement: "claim 0".into(),
            kind: qkind,
            section: qsection,
            primary_trial: "N".into(),
            secondary_trial: None,
            gold: None,
        };
        let opts = SelectionOptions {
            priority: if type_first { TierPriority::TypeFirst } else { TierPriority::SectionFirst },
            exclude_identical_statement: true,
        };
        let emb = Embedding::new(q).unwrap();
        let mut shuffled = exemplars.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.rotate_left(i as u32) % (i as u64 + 1)) as usize);
        }
        let a = ExemplarStore::new(exemplars).unwrap();
        let b = ExemplarStore::new(shuffled).unwrap();
        let pick = |s: &ExemplarStore| select_exemplar(&query, &emb, s, opts).ok().map(|e| e.sample_id.clone());
        let chosen = pick(&a);
        prop_assert_eq!(&chosen, &pick(&b));
        if let Some(id) = chosen {
            let ex = a.exemplars().iter().find(|e| e.sample_id == id).unwrap();
            prop_assert_ne!(&ex.statement, &query.statement);
        }
    }

    #[test]
    fn constant_predictions_are_fully_consistent(
        (_, gold, links) in contrast_instance(),
        l in label(),
    ) {
        let preds: Labels = gold.keys().map(|k| (k.clone(), l)).collect();
        if let Some(c) = consistency(&preds, &gold, &links).unwrap() {
            prop_assert_eq!(c, 1.0);
        }
        if let Some(f) = faithfulness(&preds, &gold, &links).unwrap() {
            prop_assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn contrast_metrics_ignore_label_encoding((preds, gold, links) in contrast_instance()) {
        let (fp, fg) = (flip_all(&preds), flip_all(&gold));
        prop_assert_eq!(faithfulness(&preds, &gold, &links).unwrap(), faithfulness(&fp, &fg, &links).unwrap());
        prop_assert_eq!(consistency(&preds, &gold, &links).unwrap(), consistency(&fp, &fg, &links).unwrap());
    }

    #[test]
    fn f1_ignores_sample_ids(
        rows in prop::collection::vec((label(), label()), 1..60),
        rot in 0usize..60,
    ) {
        let named = |prefix: &str, shift: usize| -> (Labels, Labels) {
            let n = rows.len();
            let ids: Vec<String> = (0..n).map(|i| format!("{prefix}{:03}", (i + shift) % n)).collect();
            (
                ids.iter().cloned().zip(rows.iter().map(|r| r.0)).collect(),
                ids.iter().cloned().zip(rows.iter().map(|r| r.1)).collect(),
            )
        };
        let (p1, g1) = named("a", 0);
        let (p2, g2) = named("z", rot);
        let v = f1(&p1, &g1).unwrap();
        prop_assert_eq!(v, f1(&p2, &g2).unwrap());
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn samples_round_trip_through_json(
        rows in prop::collection::vec(("[a-z0-9]{1,8}", "[ -~]{1,40}", kind(), section(), prop::option::of(label())), 1..12)
    ) {
        let samples: BTreeMap<String, Sample> = rows
            .into_iter()
            .filter(|r| !r.1.trim().is_empty())
            .map(|(id, stmt, k, s, g)| {
                let sample = Sample {
                    id: id.clone(),
                    statement: stmt,
                    kind: k,
                    section: s,
                    primary_trial: format!("NCT{id}"),
                    secondary_trial: (k == SampleType::Comparison).then(|| "NCT999".to_string()),
                    gold: g,
                };
                (id, sample)
            })
            .collect();
        let text = samples_to_json(samples.values());
        prop_assert_eq!(parse_samples(&text, Path::new("x.json")).unwrap(), samples);
    }

    #[test]
    fn pool_stays_bounded_and_sorted(
        capacity in 1usize..6,
        scores in prop::collection::vec(0.0f64..=1.0, 0..30),
    ) {
        let mut pool = InstructionPool::new(capacity);
        for (i, f) in scores.into_iter().enumerate() {
            let before = pool.clone();
            pool = update_pool(&pool, Instruction::new(format!("i{i}"), f).unwrap());
            prop_assert!(pool.len() <= capacity);
            prop_assert!(pool.items().windows(2).all(|w| w[0].f1() <= w[1].f1()));
            if before.is_full() {
                prop_assert!(pool.min_f1() >= before.min_f1());
            } else {
                prop_assert_eq!(pool.len(), before.len() + 1);
            }
        }
    }
}
