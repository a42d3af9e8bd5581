use std::path::Path;
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .display()
        .to_string()
}

fn lexicon() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/data/offense_lexicon.txt")
        .display()
        .to_string()
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bailaudit"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("MODEL_API_KEY")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["ingest", "--input", &fixture("raw_cases.jsonl"), "--output", "facts.jsonl", "--train-fraction", "0.6", "--seed", "7"]);
    ok(d, &["pair", "--roster", &fixture("roster.csv"), "--facts", "facts.jsonl", "--output", "pairs.jsonl", "--split", "test", "--max-pairs-per-fact", "2"]);
    dir
}

fn predict_args<'a>(config: &'a str, output: &'a str, backend: &'a str, roster: &'a str) -> Vec<&'a str> {
    vec![
        "predict", "--config", config, "--pairs", "pairs.jsonl", "--facts", "facts.jsonl",
        "--roster", roster, "--backend", backend, "--output", output,
    ]
}

#[test]
fn usage_errors_exit_64_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["ingest", "--bogus"]).status.code(), Some(64));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(64));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(dir.path(), &["predict", "--help"]).status.code(), Some(0));
}

#[test]
fn rag_without_index_is_a_validation_error() {
    let dir = prepared();
    let (backend, roster) = (fixture("mock_backend.json"), fixture("roster.csv"));
    let out = run(dir.path(), &predict_args("audit-rag", "p.jsonl", &backend, &roster));
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--index"));
    let out = run(dir.path(), &predict_args("no-such-config", "p.jsonl", &backend, &roster));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mixed_configurations_fail_evaluation() {
    let dir = prepared();
    let d = dir.path();
    let (backend, roster) = (fixture("mock_backend.json"), fixture("roster.csv"));
    ok(d, &predict_args("audit", "a.jsonl", &backend, &roster));
    ok(d, &predict_args("ft-vanilla", "b.jsonl", &backend, &roster));
    let mixed = std::fs::read_to_string(d.join("a.jsonl")).unwrap()
        + &std::fs::read_to_string(d.join("b.jsonl")).unwrap();
    std::fs::write(d.join("mixed.jsonl"), mixed).unwrap();
    let out = run(d, &["evaluate", "--predictions", "mixed.jsonl", "--output", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration"));
    assert!(!d.join("m.json").exists());
}

#[test]
fn failed_pairs_exit_2_with_error_records() {
    let dir = prepared();
    let d = dir.path();
    // nothing listens on port 9 locally; every request fails fast
    std::fs::write(
        d.join("dead.json"),
        r#"{"kind": "http_chat", "endpoint_url": "http://127.0.0.1:9/v1/chat/completions",
            "model_name": "dead", "timeout_secs": 2, "max_retries": 1, "backoff_base_ms": 1}"#,
    )
    .unwrap();
    let roster = d.join("roster.csv");
    let mut csv = String::from("image_id,uri,race,gender\n");
    for (id, race, gender) in [("wm1", "white", "male"), ("bm1", "black", "male"), ("wf1", "white", "female"), ("bf1", "black", "female"),
        ("wm2", "white", "male"), ("bm2", "black", "male"), ("wf2", "white", "female"), ("bf2", "black", "female")] {
        csv.push_str(&format!("{id},\"data:image/png;base64,iVBORw0KGgo=\",{race},{gender}\n"));
    }
    std::fs::write(&roster, csv).unwrap();
    let roster = roster.display().to_string();
    let out = run(d, &predict_args("audit", "p.jsonl", "dead.json", &roster));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = std::fs::read_to_string(d.join("p.jsonl")).unwrap();
    assert!(!lines.is_empty());
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["error"].is_string());
        assert_eq!(v["attempts"], 2);
    }
    // error records are excluded from metrics
    let out = run(d, &["evaluate", "--predictions", "p.jsonl", "--output", "m.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn reruns_are_byte_identical() {
    let a = prepared();
    let b = prepared();
    for name in ["facts.jsonl", "pairs.jsonl"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let (backend, roster) = (fixture("mock_backend.json"), fixture("roster.csv"));
    for dir in [&a, &b] {
        ok(dir.path(), &predict_args("audit", "p.jsonl", &backend, &roster));
    }
    assert_eq!(
        std::fs::read(a.path().join("p.jsonl")).unwrap(),
        std::fs::read(b.path().join("p.jsonl")).unwrap()
    );
    let id = |dir: &Path| -> serde_json::Value {
        let raw = std::fs::read_to_string(dir.join("p.jsonl.manifest.json")).unwrap();
        serde_json::from_str::<serde_json::Value>(&raw).unwrap()["manifest_id"].clone()
    };
    assert_eq!(id(a.path()), id(b.path()));
}

#[test]
fn checkpoint_resume_skips_finished_pairs() {
    let dir = prepared();
    let d = dir.path();
    let (backend, roster) = (fixture("mock_backend.json"), fixture("roster.csv"));
    let mut args = predict_args("audit", "p.jsonl", &backend, &roster);
    args.extend(["--checkpoint", "ckpt.jsonl", "--checkpoint-every", "5"]);
    ok(d, &args);
    let first = std::fs::read(d.join("p.jsonl")).unwrap();
    ok(d, &args);
    assert_eq!(std::fs::read(d.join("p.jsonl")).unwrap(), first);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("p.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["counts"]["queried"], 0);
    assert_eq!(manifest["counts"]["resumed"], manifest["counts"]["pairs"]);
}

#[test]
fn index_query_excludes_the_query_case() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["index", "build", "--facts", "facts.jsonl", "--output", "facts.idx"]);
    let facts = std::fs::read_to_string(d.join("facts.jsonl")).unwrap();
    let train_id = facts
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["split"] == "train")
        .unwrap()["case_id"]
        .as_str()
        .unwrap()
        .to_string();
    let out = ok(d, &["index", "query", "--index", "facts.idx", "--case-id", &train_id, "--facts", "facts.jsonl"]);
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let ranked = result["ranked"].as_array().unwrap();
    assert_eq!(ranked.len(), 3);
    assert!(ranked.iter().all(|n| n["case_id"] != train_id.as_str()));

    let out = ok(d, &["index", "query", "--index", "facts.idx", "--text", "police recovered ganja", "--k", "2"]);
    let result: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(result["ranked"].as_array().unwrap().len(), 2);
}

#[test]
fn typed_export_needs_typed_facts() {
    let dir = prepared();
    let d = dir.path();
    let roster = fixture("roster.csv");
    let lexicon = lexicon();
    let out = run(d, &["export-sft", "--facts", "facts.jsonl", "--roster", &roster, "--scheme", "typed", "--output", "sft.jsonl"]);
    assert_eq!(out.status.code(), Some(1));

    ok(d, &["tag", "--facts", "facts.jsonl", "--lexicon", &lexicon, "--output", "typed.jsonl"]);
    ok(d, &["export-sft", "--facts", "facts.jsonl", "--typed", "typed.jsonl", "--roster", &roster, "--scheme", "typed", "--lexicon", &lexicon, "--output", "sft.jsonl", "--manifest-out", "sft.manifest.json"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("sft.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["hyperparameters"]["learning_rate"], 1e-5);
    assert_eq!(manifest["hyperparameters"]["effective_batch_size"], 8);
    assert!(manifest["lexicon_sha256"].is_string());
    let records = std::fs::read_to_string(d.join("sft.jsonl")).unwrap();
    let n = records.lines().count() as u64;
    assert_eq!(manifest["train_count"].as_u64().unwrap() + manifest["validation_count"].as_u64().unwrap(), n);
    assert!(records.contains("Offense types: "));
}
