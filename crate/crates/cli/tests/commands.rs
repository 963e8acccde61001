mod support;

use std::path::Path;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use support::{cot_server, dev_links, dev_samples, write_corpus, MockServer};
use trialnli::{F1Mode, Label, Strategy};
use trialnli_cli::{
    cmd_build_store, cmd_opro, cmd_run, cmd_score, cmd_validate, Exit, RunArgs, RunConfig, Settings,
};

fn no_cancel() -> Arc<AtomicBool> {
    Arc::new(AtomicBool::new(false))
}

fn config(server: &MockServer, cache: Option<&Path>) -> RunConfig {
    RunConfig::resolve(Settings {
        endpoint: Some(server.base_url.clone()),
        model: Some("stub-model".into()),
        cache: cache.map(Path::to_path_buf),
        workers: Some(2),
        backoff_ms: Some(1),
        embedding_dim: Some(16),
        ..Settings::default()
    })
    .unwrap()
}

fn run_args<'a>(strategy: Strategy, data: &'a Path, out: &'a Path) -> RunArgs<'a> {
    RunArgs {
        strategy,
        data_dir: data,
        split: None,
        out,
        store: None,
        pool: None,
    }
}

fn validate(dir: &Path) -> (Exit, String) {
    let mut buf = Vec::new();
    let exit = cmd_validate(dir, &mut buf);
    (exit, String::from_utf8(buf).unwrap())
}

#[test]
fn validate_reports_per_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_corpus(tmp.path(), "dev", &dev_samples(), &dev_links());
    let (exit, text) = validate(&data);
    assert_eq!(exit, Exit::Ok, "{text}");
    assert!(text.contains("no errors"));

    let mut samples = dev_samples();
    samples[2].primary_trial = "NCT4040".into();
    let bad = tempfile::tempdir().unwrap();
    write_corpus(bad.path(), "dev", &samples, &[]);
    let (exit, text) = validate(bad.path());
    assert_eq!(exit, Exit::Invalid);
    assert!(text.contains("d3") && text.contains("NCT4040"), "{text}");

    let empty = tempfile::tempdir().unwrap();
    let (exit, text) = validate(empty.path());
    assert_eq!(exit, Exit::Invalid);
    assert!(text.contains("no sample files found"), "{text}");
}

#[test]
fn zero_shot_run_writes_predictions_and_sidecars() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_corpus(&tmp.path().join("data"), "dev", &dev_samples()[..3], &[]);
    let out = tmp.path().join("preds.json");
    let server = cot_server();
    let cfg = config(&server, None);

    let exit = cmd_run(
        &run_args(Strategy::ZeroShotCot, &data, &out),
        &cfg,
        no_cancel(),
    )
    .unwrap();
    assert_eq!(exit, Exit::Ok);
    assert_eq!(server.hits(), 6);

    let preds: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(preds.as_object().unwrap().len(), 3);
    // every statement has even length, so the stub says Entailment
    assert_eq!(preds["d1"]["Prediction"], "Entailment");
    assert_eq!(preds["d3"]["Prediction"], "Entailment");

    let details = std::fs::read_to_string(tmp.path().join("preds.details.jsonl")).unwrap();
    assert_eq!(details.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(details.lines().next().unwrap()).unwrap();
    assert_eq!(first["prompt_hashes"].as_array().unwrap().len(), 2);

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("preds.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["strategy"], "zeroshot-cot");
    assert_eq!(manifest["done"], 3);
    assert_eq!(manifest["network_calls"], 6);
    assert_eq!(manifest["template_versions"].as_object().unwrap().len(), 6);
    assert!(!manifest.to_string().contains("sekret"));
}

#[test]
fn warm_cache_rerun_is_offline_and_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_corpus(&tmp.path().join("data"), "dev", &dev_samples(), &[]);
    let cache = tmp.path().join("cache.jsonl");
    let server = cot_server();
    let cfg = config(&server, Some(&cache));

    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    cmd_run(
        &run_args(Strategy::ZeroShotCot, &data, &a),
        &cfg,
        no_cancel(),
    )
    .unwrap();
    let hits = server.hits();
    cmd_run(
        &run_args(Strategy::ZeroShotCot, &data, &b),
        &cfg,
        no_cancel(),
    )
    .unwrap();
    assert_eq!(server.hits(), hits);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("b.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["network_calls"], 0);
    assert_eq!(manifest["cache_hits"], 8);
}

#[test]
fn config_errors_precede_network_calls() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_corpus(&tmp.path().join("data"), "dev", &dev_samples(), &[]);
    let out = tmp.path().join("p.json");
    let server = cot_server();
    let cfg = config(&server, None);

    let mut args = run_args(Strategy::DynamicOneShot, &data, &out);
    args.store = Some(Path::new("/no/such/store.jsonl"));
    let err = cmd_run(&args, &cfg, no_cancel()).unwrap_err();
    assert_eq!(err.exit, Exit::Config);

    let err = cmd_run(&run_args(Strategy::Opro, &data, &out), &cfg, no_cancel()).unwrap_err();
    assert_eq!(err.exit, Exit::Config);

    let mut args = run_args(Strategy::ZeroShotCot, &data, &out);
    args.split = Some("test");
    assert_eq!(
        cmd_run(&args, &cfg, no_cancel()).unwrap_err().exit,
        Exit::Config
    );

    let nowhere = tmp.path().join("missing/p.json");
    let err = cmd_run(
        &run_args(Strategy::ZeroShotCot, &data, &nowhere),
        &cfg,
        no_cancel(),
    )
    .unwrap_err();
    assert_eq!(err.exit, Exit::Config);

    assert_eq!(server.hits(), 0);
    assert!(!out.exists());
}

#[test]
fn endpoint_down_and_partial_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_corpus(&tmp.path().join("data"), "dev", &dev_samples(), &[]);

    let down = MockServer::start(|_| (503, "unavailable".into()));
    let out = tmp.path().join("down.json");
    let err = cmd_run(
        &run_args(Strategy::ZeroShotCot, &data, &out),
        &config(&down, None),
        no_cancel(),
    )
    .unwrap_err();
    assert_eq!(err.exit, Exit::Endpoint);
    assert!(!out.exists());
    let manifest = std::fs::read_to_string(tmp.path().join("down.manifest.json")).unwrap();
    assert!(manifest.contains("\"failed\""));

    let picky = MockServer::start(|req| {
        if req.body.contains("Children") {
            (400, "refused".into())
        } else {
            (
                200,
                support::completion(&support::answer(Label::Entailment)),
            )
        }
    });
    let out = tmp.path().join("partial.json");
    let exit = cmd_run(
        &run_args(Strategy::ZeroShotCot, &data, &out),
        &config(&picky, None),
        no_cancel(),
    )
    .unwrap();
    assert_eq!(exit, Exit::Partial);
    let preds = std::fs::read_to_string(&out).unwrap();
    assert!(preds.contains("\"d3\""));
    let manifest = std::fs::read_to_string(tmp.path().join("partial.manifest.json")).unwrap();
    assert!(manifest.contains("\"partial\""));
}

#[test]
fn interrupted_run_leaves_no_predictions_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_corpus(&tmp.path().join("data"), "dev", &dev_samples(), &[]);
    let server = cot_server();
    let out = tmp.path().join("p.json");
    let cancel = Arc::new(AtomicBool::new(true));
    let exit = cmd_run(
        &run_args(Strategy::ZeroShotCot, &data, &out),
        &config(&server, None),
        cancel,
    )
    .unwrap();
    assert_eq!(exit, Exit::Interrupted);
    assert!(!out.exists());
    let manifest = std::fs::read_to_string(tmp.path().join("p.manifest.json")).unwrap();
    assert!(manifest.contains("\"interrupted\""));
}

#[test]
fn store_then_one_shot_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_corpus(&tmp.path().join("data"), "train", &dev_samples(), &[]);
    let server = cot_server();
    let cfg = config(&server, None);
    let store = tmp.path().join("store.jsonl");

    assert_eq!(
        cmd_build_store(&data, Some("train"), &store, &cfg, no_cancel()).unwrap(),
        Exit::Ok
    );
    let lines = std::fs::read_to_string(&store).unwrap();
    // the parity stub says Entailment for d1..d3 and Contradiction for d4
    let ids: Vec<String> = lines
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["sample_id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(ids, ["d1", "d2"]);

    let out = tmp.path().join("oneshot.json");
    let mut args = run_args(Strategy::DynamicOneShot, &data, &out);
    args.store = Some(&store);
    assert_eq!(cmd_run(&args, &cfg, no_cancel()).unwrap(), Exit::Ok);
    let details = std::fs::read_to_string(tmp.path().join("oneshot.details.jsonl")).unwrap();
    assert!(details.lines().all(|l| l.contains("exemplar_id")));

    let wrong_dim = RunConfig::resolve(Settings {
        endpoint: Some(server.base_url.clone()),
        embedding_dim: Some(8),
        ..Settings::default()
    })
    .unwrap();
    assert_eq!(
        cmd_run(&args, &wrong_dim, no_cancel()).unwrap_err().exit,
        Exit::Config
    );
}

#[test]
fn opro_search_then_run() {
    let tmp = tempfile::tempdir().unwrap();
    let samples: Vec<_> = support::core::labeled(12);
    let data = write_corpus(&tmp.path().join("data"), "dev", &samples, &[]);
    let server = MockServer::start(|req| {
        let text = req.json()["messages"][0]["content"]
            .as_str()
            .unwrap()
            .to_string();
        let reply = if text.contains("Write a new instruction") {
            "[Read the numbers carefully.]".to_string()
        } else {
            support::answer(Label::Entailment)
        };
        (200, support::completion(&reply))
    });
    let cfg = RunConfig::resolve(Settings {
        endpoint: Some(server.base_url.clone()),
        opro_iterations: Some(2),
        opro_demos: Some(2),
        opro_eval: Some(6),
        opro_capacity: Some(3),
        ..Settings::default()
    })
    .unwrap();
    let pool = tmp.path().join("pool.json");
    assert_eq!(
        cmd_opro(&data, None, &pool, &cfg, no_cancel()).unwrap(),
        Exit::Ok
    );
    let log = std::fs::read_to_string(tmp.path().join("pool.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let out = tmp.path().join("opro.json");
    let mut args = run_args(Strategy::Opro, &data, &out);
    args.pool = Some(&pool);
    assert_eq!(cmd_run(&args, &cfg, no_cancel()).unwrap(), Exit::Ok);
}

fn score(preds: &str, links: bool) -> (serde_json::Value, String) {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_corpus(tmp.path(), "dev", &dev_samples(), &dev_links());
    let p = tmp.path().join("preds.json");
    std::fs::write(&p, preds).unwrap();
    let links_path = data.join("contrast_links.json");
    let mut buf = Vec::new();
    let exit = cmd_score(
        &p,
        &data.join("dev.json"),
        links.then_some(links_path.as_path()),
        F1Mode::EntailmentPositive,
        &mut buf,
    )
    .unwrap();
    assert_eq!(exit, Exit::Ok);
    let text = String::from_utf8(buf).unwrap();
    let json_start = text.find('{').unwrap();
    (serde_json::from_str(&text[json_start..]).unwrap(), text)
}

fn preds_json(labels: &[(&str, &str)]) -> String {
    let map: serde_json::Map<String, serde_json::Value> = labels
        .iter()
        .map(|(id, l)| (id.to_string(), serde_json::json!({ "Prediction": l })))
        .collect();
    serde_json::Value::Object(map).to_string()
}

#[test]
fn score_gold_identical_predictions() {
    let gold = preds_json(&[
        ("d1", "Entailment"),
        ("d2", "Entailment"),
        ("d3", "Contradiction"),
        ("d4", "Entailment"),
    ]);
    let (report, table) = score(&gold, true);
    assert_eq!(report["f1"], 1.0);
    assert_eq!(report["consistency"], 1.0);
    assert_eq!(report["faithfulness"], 1.0);
    assert!(table.contains("Base F1"));
}

#[test]
fn score_faithfulness_half() {
    // two altering pairs with a correct original, one flipped
    let tmp = tempfile::tempdir().unwrap();
    let mut samples = dev_samples();
    samples.push(support::single(
        "d5",
        "Adults are excluded.",
        trialnli::SectionId::EligibilityCriteria,
        Some(Label::Contradiction),
    ));
    let mut links = dev_links();
    links.push(trialnli::ContrastPair {
        contrast_id: "d5".into(),
        original_id: "d4".into(),
        kind: trialnli::ContrastKind::SemanticAltering,
    });
    let data = write_corpus(tmp.path(), "dev", &samples, &links);
    let p = tmp.path().join("p.json");
    std::fs::write(
        &p,
        preds_json(&[
            ("d1", "Entailment"),
            ("d2", "Entailment"),
            ("d3", "Contradiction"),
            ("d4", "Entailment"),
            ("d5", "Entailment"),
        ]),
    )
    .unwrap();
    let mut buf = Vec::new();
    cmd_score(
        &p,
        &data.join("dev.json"),
        Some(&data.join("contrast_links.json")),
        F1Mode::EntailmentPositive,
        &mut buf,
    )
    .unwrap();
    let text = String::from_utf8(buf).unwrap();
    let report: serde_json::Value = serde_json::from_str(&text[text.find('{').unwrap()..]).unwrap();
    assert_eq!(report["faithfulness"], 0.5);
    assert_eq!(report["counts"]["n_faithfulness_pairs"], 2);
    assert!(text.contains("0.5000"));
}

#[test]
fn score_without_links_reports_f1_only() {
    let (report, table) = score(
        &preds_json(&[("d1", "Entailment"), ("d3", "Entailment")]),
        false,
    );
    assert_eq!(report["f1"].as_f64().unwrap(), 2.0 / 3.0);
    assert!(report["faithfulness"].is_null());
    assert!(report["consistency"].is_null());
    assert!(table.contains("n/a"));
}

#[test]
fn score_rejects_mismatched_files() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_corpus(tmp.path(), "dev", &dev_samples(), &[]);
    let p = tmp.path().join("p.json");
    let mut sink = Vec::new();
    std::fs::write(&p, preds_json(&[("zz", "Entailment")])).unwrap();
    let err = cmd_score(&p, &data.join("dev.json"), None, F1Mode::Macro, &mut sink).unwrap_err();
    assert_eq!(err.exit, Exit::Invalid);
    std::fs::write(&p, r#"{"d1": {"Label": "Entailment"}}"#).unwrap();
    let err = cmd_score(&p, &data.join("dev.json"), None, F1Mode::Macro, &mut sink).unwrap_err();
    assert_eq!(err.exit, Exit::Invalid);
}
