use std::path::Path;
use std::process::{Command, Output};

fn re3g(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_re3g"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

/// Synthetic corpus ingested and split into `run_dir`.
fn prepared(run_dir: &Path) {
    let src = run_dir.join("src");
    let src_s = src.to_str().unwrap();
    ok(&re3g(
        run_dir,
        &["synth", "--out", src_s, "--clusters", "3", "--sections", "4", "--dialogues", "24", "--seed", "5"],
    ));
    let summary = ok(&re3g(
        run_dir,
        &[
            "ingest",
            "--documents",
            src.join("documents.jsonl").to_str().unwrap(),
            "--dialogues",
            src.join("dialogues.jsonl").to_str().unwrap(),
            "--structural",
        ],
    ));
    assert_eq!(summary["documents"], 3);
    assert_eq!(summary["dialogues"], 24);
    let split = ok(&re3g(run_dir, &["split"]));
    assert!(split["train"].as_u64().unwrap() > 0);
}

#[test]
fn later_phase_without_its_predecessor_fails_with_prerequisite_error() {
    let dir = tempfile::tempdir().unwrap();
    prepared(dir.path());
    for (args, needle) in [
        (&["train-retriever", "--phase", "2"][..], "phase-1"),
        (&["train-reranker"][..], "phase1"),
        (&["index"][..], "not found"),
        (&["train-generator", "--stage", "2"][..], "not found"),
    ] {
        let out = re3g(dir.path(), args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains("missing prerequisite"), "{args:?}: {stderr}");
        assert!(stderr.contains(needle), "{args:?}: {stderr}");
    }
}

#[test]
fn unknown_phase_or_stage_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train-retriever", "--phase", "4"][..],
        &["train-retriever", "--phase", "0"][..],
        &["train-generator", "--stage", "3"][..],
        &["train-retriever"][..],
        &["eval", "--predictions", "p.jsonl"][..],
    ] {
        let out = re3g(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.contains("--help"), "{args:?}: {stderr}");
    }
    let out = re3g(dir.path(), &["--set", "tau=-1", "split"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));
}

#[test]
fn eval_scores_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let reference = serde_json::json!({
        "example_id": "e1",
        "context": {"turns": [{"role": "user", "text": "what colour is the case?"}]},
        "positive_passage_ids": ["d#1"],
        "gold_span": "the case is blue",
        "gold_answer": "it is blue",
        "hard_negative_ids": []
    });
    let prediction = serde_json::json!({
        "example_id": "e1",
        "answer": "it is blue",
        "span": "the case is blue",
        "ranked_passage_ids": ["d#0", "d#1"]
    });
    let refs = dir.path().join("refs.jsonl");
    let preds = dir.path().join("preds.jsonl");
    std::fs::write(&refs, format!("{reference}\n")).unwrap();
    std::fs::write(&preds, format!("{prediction}\n")).unwrap();
    let out_dir = dir.path().join("report");
    let report = ok(&re3g(
        dir.path(),
        &[
            "eval",
            "--predictions",
            preds.to_str().unwrap(),
            "--references",
            refs.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
    ));
    assert_eq!(report["metrics"]["token_f1"], 1.0);
    assert_eq!(report["metrics"]["mrr"], 0.5);
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(written["metrics"], report["metrics"]);
    assert!(out_dir.join("report.md").exists());
}

#[test]
fn end_to_end_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    prepared(run);
    let sets = [
        "--set", "max_steps=40", "--set", "generator_epochs=100", "--set", "k_retrieve=6", "--set", "k_rerank_out=2",
        "--set", "n_negatives=3", "--set", "beam_size=1", "--set", "max_decode_len=32",
    ];
    let with = |args: &[&str]| -> Vec<String> { sets.iter().chain(args).map(|s| s.to_string()).collect() };
    let run_with = |args: &[&str]| {
        let owned = with(args);
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        re3g(run, &refs)
    };
    let artifacts = ok(&run_with(&["train-all"]));
    for (name, present) in artifacts.as_object().unwrap() {
        assert_eq!(present, true, "{name} missing");
    }
    let echoed = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("max_steps = 40"), "{echoed}");

    let report = ok(&run_with(&["eval"]));
    for key in ["token_f1", "rouge_l", "recall@1", "mrr"] {
        let v = report["metrics"][key].as_f64().unwrap_or_else(|| panic!("{key} missing"));
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(run.join("eval").join("predictions.jsonl").exists());
    let ablated = ok(&run_with(&["eval", "--no-reranker", "--no-refinement"]));
    assert_eq!(ablated["config"]["use_reranker"], false);
    assert_eq!(ablated["config"]["use_refinement"], false);

    let index = ok(&run_with(&["index"]));
    assert_eq!(index["snapshot_version"], 2);
}
