use std::path::Path;
use std::process::{Command, Output};

fn split_dit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_split-dit"))
        .args(args)
        .env_remove("SPLITDIT_LLM_URL")
        .env_remove("SPLITDIT_LLM_KEY")
        .env_remove("SPLITDIT_CACHE")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn run(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--caption", "a red ball on a table", "--parser", "rules", "--train-steps", "5", "--out"];
    args.push(dir.to_str().unwrap());
    args.extend_from_slice(extra);
    split_dit(&args)
}

#[test]
fn run_writes_core_artifacts() {
    let d = tempfile::tempdir().unwrap();
    ok(&run(d.path(), &[]));
    for f in ["graph.json", "split.json", "schedule.json", "manifest.json"] {
        assert!(d.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn manifest_independent_of_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&run(a.path(), &["--threads", "1"]));
    ok(&run(b.path(), &["--threads", "3"]));
    let ma = std::fs::read(a.path().join("manifest.json")).unwrap();
    let mb = std::fs::read(b.path().join("manifest.json")).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn missing_caption_is_usage_error() {
    let out = split_dit(&["run", "--out", "/tmp/never-written"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(split_dit(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn llm_parser_offline_without_cache_fails_in_parse() {
    let cache = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let out = split_dit(&[
        "run",
        "--caption",
        "a red ball on a table",
        "--parser",
        "llm",
        "--cache",
        cache.path().to_str().unwrap(),
        "--out",
        out_dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage parse"), "{err}");
    assert!(err.contains("no cache entry"), "{err}");
}

#[test]
fn parse_split_and_encode() {
    let graph = ok(&split_dit(&["parse", "--caption", "a red ball on a table"]));
    let v: serde_json::Value = serde_json::from_str(&graph).unwrap();
    assert_eq!(v["nodes"].as_array().unwrap().len(), 2);
    let text = ok(&split_dit(&["split", "--caption", "a red ball on a table", "--text"]));
    assert_eq!(text.trim(), "[OBJECT] ball. [OBJECT] table. [RELATION] ball on table. [ATTRIBUTE] ball is red");
    let d = tempfile::tempdir().unwrap();
    let shapes = ok(&split_dit(&["encode", "--caption", "a red ball on a table", "--out", d.path().to_str().unwrap()]));
    assert!(shapes.starts_with("T: "), "{shapes}");
    assert!(d.path().join("T.tseq").exists() && d.path().join("prim_A.tseq").exists());
}

#[test]
fn simulate_then_schedule_closes_the_loop() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path().to_str().unwrap();
    ok(&split_dit(&["simulate", "--caption", "a dog beside a tree", "--order", "all", "--runs", "3", "--out", dir]));
    assert!(d.path().join("traces/run_002.jsonl").exists());
    let traces = d.path().join("traces");
    let sched = ok(&split_dit(&["schedule", "--traces", traces.to_str().unwrap(), "--w", "3", "--tau", "1e-4", "--mode", "index"]));
    let v: serde_json::Value = serde_json::from_str(&sched).unwrap();
    assert_eq!(v["s_obj"], 0);
    assert!(v["s_rel"].as_u64().unwrap() < v["s_attr"].as_u64().unwrap());
    let strict = split_dit(&["schedule", "--traces", traces.to_str().unwrap(), "--strict", "--tau", "1e-12"]);
    assert_eq!(strict.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&strict.stderr).contains("stage schedule"));
}

#[test]
fn simulate_is_repeatable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&split_dit(&[
            "simulate", "--caption", "a cat on a chair", "--s-rel", "8", "--s-attr", "30", "--seed", "4", "--out",
            d.path().to_str().unwrap(),
        ]));
    }
    let ta = std::fs::read(a.path().join("traces/run_000.jsonl")).unwrap();
    let tb = std::fs::read(b.path().join("traces/run_000.jsonl")).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn train_writes_curve_and_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&split_dit(&["train", "--steps", "3", "--out", d.path().to_str().unwrap()]));
    assert!(out.contains("ratio"));
    let curve = std::fs::read_to_string(d.path().join("loss_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert!(curve.starts_with("step,loss\n"));
    assert!(d.path().join("checkpoint.bin").exists());
}

#[test]
fn report_over_two_orders() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(&run(a.path(), &["--order", "ORA"]));
    ok(&run(b.path(), &["--order", "off"]));
    let j = tempfile::tempdir().unwrap();
    let json = j.path().join("report.json");
    let text = ok(&split_dit(&["report", a.path().to_str().unwrap(), b.path().to_str().unwrap(), "--json", json.to_str().unwrap()]));
    assert_eq!(text.matches("schedule:").count(), 2);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
    let orders: Vec<&str> = v["ablation"].as_array().unwrap().iter().map(|r| r["order"].as_str().unwrap()).collect();
    assert_eq!(orders, vec!["ORA", "off"]);

    let missing = split_dit(&["report", j.path().to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing artifact"));
}

#[test]
fn config_file_feeds_run_and_flags_override() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"caption": "a small dog under a bench", "train": {"steps": 2}, "seed": 3}"#).unwrap();
    let out_dir = d.path().join("out");
    ok(&split_dit(&["run", "--config", cfg.to_str().unwrap(), "--order", "RAO", "--out", out_dir.to_str().unwrap()]));
    let written: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["order"], "RAO");
    assert_eq!(written["seed"], 3);
    assert_eq!(written["caption"], "a small dog under a bench");
}
