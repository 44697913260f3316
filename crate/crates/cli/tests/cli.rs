use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

const TOPICS: [&str; 8] = [
    "insulin regulates blood glucose in diabetes",
    "aspirin inhibits platelet aggregation",
    "heparin is an anticoagulant given in thrombosis",
    "vitamin d supports bone mineralization",
    "asthma involves airway inflammation and wheeze",
    "statins lower ldl cholesterol",
    "penicillin treats bacterial infection",
    "hypertension raises the risk of stroke",
];

fn dagrag(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dagrag"))
        .current_dir(dir)
        .env("DAGRAG_CONFIG", dir.join("cfg.json"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn ok(o: Output) -> String {
    assert_eq!(
        o.status.code(),
        Some(0),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn write_jsonl(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).unwrap();
}

/// Corpus, config and scripted rules. Each item's question carries a tag
/// that the rules map to its gold letter.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let docs: Vec<Value> = (0..24)
        .map(|i| {
            let t = TOPICS[i % TOPICS.len()];
            let source = ["pubmed", "wikipedia", "textbooks"][i % 3];
            json!({"source": source, "title": format!("doc{i}"), "text": format!("{t}. Note {i}.")})
        })
        .collect();
    write_jsonl(&p.join("docs.jsonl"), &docs);

    let golds = ["A", "B", "C", "D"];
    let mut items = Vec::new();
    let mut rules = Vec::new();
    for i in 0..20 {
        let gold = golds[(i * 7 + 3) % 4];
        let options: Vec<Value> = golds.iter().map(|l| json!({"label": l, "text": format!("choice {l}{i}")})).collect();
        items.push(json!({
            "id": format!("q{i}"),
            "question": format!("Item tag-{i}: which option about {}?", TOPICS[i % 8]),
            "kind": "mcq",
            "options": options,
            "gold": gold,
        }));
        rules.push(json!({"contains": format!("tag-{i}:"), "response": gold}));
    }
    rules.push(json!({"contains": "", "response": "A"}));
    write_jsonl(&p.join("items.jsonl"), &items);
    write_jsonl(&p.join("gold.jsonl"), &rules);
    write_jsonl(&p.join("always_a.jsonl"), &[json!({"contains": "", "response": "A"})]);

    let cfg = json!({
        "chunks": "chunks.jsonl",
        "index": {"path": "corpus.idx", "seed": 7},
        "encoder": {"kind": "hash", "dims": 64},
        "reranker": {"kind": "overlap"},
        "backends": {"default": {"scripted": "gold.jsonl"}},
        "pipeline": {"retrieve_n": 3}
    });
    fs::write(p.join("cfg.json"), cfg.to_string()).unwrap();
    dir
}

fn built() -> TempDir {
    let dir = workspace();
    ok(dagrag(dir.path(), &["ingest", "--input", "docs.jsonl"]));
    ok(dagrag(dir.path(), &["index", "build"]));
    dir
}

#[test]
fn ingest_prints_manifest() {
    let dir = workspace();
    let out = ok(dagrag(dir.path(), &["ingest", "--input", "docs.jsonl", "--manifest", "m.json"]));
    assert!(out.lines().next().unwrap().starts_with("Data"));
    assert!(out.lines().any(|l| l.split_whitespace().take(2).eq(["Merge", "24"])));
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert!(m.is_object());
    assert_eq!(fs::read_to_string(dir.path().join("chunks.jsonl")).unwrap().lines().count(), 24);
}

#[test]
fn search_prints_k_descending_lines() {
    let dir = built();
    let out = ok(dagrag(dir.path(), &["index", "search", "--query", "insulin and blood glucose", "--k", "5"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 5);
    let scores: Vec<f64> = lines
        .iter()
        .map(|l| {
            let (id, s) = l.split_once('\t').expect("tab separated");
            assert!(id.contains(':'));
            s.parse().unwrap()
        })
        .collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(lines[0].starts_with("pubmed:0:0"));

    let exact = ok(dagrag(dir.path(), &["index", "search", "--query", "insulin and blood glucose", "--k", "5", "--exact"]));
    assert_eq!(exact, out);
    let reranked = ok(dagrag(dir.path(), &["index", "search", "--query", "insulin and blood glucose", "--k", "3", "--rerank"]));
    assert_eq!(reranked.lines().count(), 3);
}

#[test]
fn stats_reports_shape() {
    let dir = built();
    let out = ok(dagrag(dir.path(), &["index", "stats"]));
    assert!(out.contains("vectors\t24\n"));
    assert!(out.contains("dims\t64\n"));
    assert!(out.contains("seed\t7\n"));
}

#[test]
fn ask_emits_trace() {
    let dir = built();
    let out = ok(dagrag(dir.path(), &["ask", "Item tag-3: what now?"]));
    let trace: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(trace["final_answer"], "A");
    assert_eq!(trace["schema_version"], 1);

    let printed = ok(dagrag(dir.path(), &["ask", "Item tag-3: what now?", "--trace", "t.json", "--no-rag"]));
    assert_eq!(printed, "A\n");
    let trace: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
    assert_eq!(trace["retrieval_calls"], 0);
}

#[test]
fn ask_without_index_when_rag_disabled() {
    let dir = workspace();
    let out = ok(dagrag(dir.path(), &["ask", "anything", "--no-rag", "--no-dag"]));
    let trace: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(trace["final_answer"], "A");
}

#[test]
fn bench_run_with_gold_backend() {
    let dir = built();
    let out = ok(dagrag(
        dir.path(),
        &["bench", "run", "--dataset", "items.jsonl", "--traces", "t1.jsonl", "--json", "r.json"],
    ));
    let summary = out.lines().nth(2).unwrap();
    assert!(summary.starts_with("items"), "{out}");
    assert!(summary.ends_with("1.000"), "{out}");
    let reports: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(reports[0]["correct"], 20);

    ok(dagrag(dir.path(), &["bench", "run", "--dataset", "items.jsonl", "--traces", "t2.jsonl", "--workers", "4"]));
    assert_eq!(
        fs::read(dir.path().join("t1.jsonl")).unwrap(),
        fs::read(dir.path().join("t2.jsonl")).unwrap()
    );

    let report = ok(dagrag(dir.path(), &["report", "--traces", "t1.jsonl"]));
    assert_eq!(report.lines().nth(2).unwrap(), summary);
}

#[test]
fn bench_run_with_always_a_backend() {
    let dir = workspace();
    let p = dir.path();
    let cfg = json!({"backends": {"default": {"scripted": "always_a.jsonl"}}, "pipeline": {"enable_rag": false}});
    fs::write(p.join("a.json"), cfg.to_string()).unwrap();
    let out = ok(dagrag(p, &["--config", "a.json", "bench", "run", "--dataset", "items.jsonl"]));
    // Golds cycle D, C, B, A over (7i + 3) mod 4, so 5 of 20 are A.
    assert!(out.lines().nth(2).unwrap().ends_with("0.250"), "{out}");
}

#[test]
fn ablate_and_sweep() {
    let dir = built();
    let out = ok(dagrag(dir.path(), &["bench", "ablate", "--dataset", "items.jsonl", "--name", "fx"]));
    for v in ["base", "+rag", "+gate+rag", "+gate+dag", "+gate+dag+rag"] {
        assert!(out.lines().any(|l| l.split_whitespace().nth(1) == Some(v)), "{v} missing:\n{out}");
    }
    let only = ok(dagrag(dir.path(), &["bench", "ablate", "--dataset", "items.jsonl", "--only", "base"]));
    assert_eq!(only.lines().take_while(|l| !l.is_empty()).count(), 3);

    let out = ok(dagrag(dir.path(), &["bench", "sweep", "--dataset", "items.jsonl", "--n", "1,3", "--traces", "s.jsonl"]));
    assert!(out.contains("Documents"));
    let report = ok(dagrag(dir.path(), &["report", "--traces", "s.jsonl"]));
    assert!(report.contains("Documents"));
}

#[test]
fn curate_stages() {
    let dir = built();
    let p = dir.path();
    let records: Vec<Value> = (0..10)
        .map(|i| {
            json!({"id": format!("r{i}"), "instruction": format!("explain {}", TOPICS[i % 8]), "response": "ok", "quality_score": i as f64})
        })
        .collect();
    write_jsonl(&p.join("records.jsonl"), &records);
    let out = ok(dagrag(p, &["curate", "filter", "--input", "records.jsonl", "--output", "kept.jsonl", "--threshold", "7"]));
    assert_eq!(out, "kept 3 of 10\n");

    let out = ok(dagrag(p, &["curate", "kcenter", "--input", "records.jsonl", "--output", "k.jsonl", "--m", "4"]));
    assert!(out.starts_with("selected 4 of 10"));
    let first: Value = serde_json::from_str(fs::read_to_string(p.join("k.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["id"], "r0");

    write_jsonl(
        &p.join("rag.jsonl"),
        &[json!({"question": "what lowers ldl cholesterol?", "golden_docs": ["pubmed:5:0"], "answer": "statins"})],
    );
    ok(dagrag(p, &["curate", "ragrecords", "--input", "rag.jsonl", "--output", "train.jsonl", "--n-distractors", "2"]));
    let rec: Value = serde_json::from_str(fs::read_to_string(p.join("train.jsonl")).unwrap().trim()).unwrap();
    let distractors = rec["distractor_docs"].as_array().unwrap();
    assert_eq!(distractors.len(), 2);
    assert!(distractors.iter().all(|d| d != "pubmed:5:0"));
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let p = dir.path();
    assert_eq!(dagrag(p, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(dagrag(p, &["index", "search"]).status.code(), Some(2));
    assert_eq!(dagrag(p, &["bench", "sweep", "--dataset", "x", "--n", "one"]).status.code(), Some(2));

    let missing = dagrag(p, &["index", "stats"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error["));

    let bad = dagrag(p, &["bench", "run", "--dataset", "nope.jsonl"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = workspace();
    fs::write(dir.path().join("bad.json"), r#"{"pipeline": {"retreive_n": 3}}"#).unwrap();
    let o = dagrag(dir.path(), &["--config", "bad.json", "ask", "q"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("retreive_n"), "{err}");
}

#[test]
fn flags_override_config() {
    let dir = built();
    let out = ok(dagrag(dir.path(), &["ask", "Item tag-1: q", "--retrieve-n", "2", "--no-dag"]));
    let trace: Value = serde_json::from_str(&out).unwrap();
    assert!(trace["base_retrieved"].as_array().unwrap().len() <= 2);
    assert!(trace["graph"]["nodes"].as_array().unwrap().len() == 1);
}
