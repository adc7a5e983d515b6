use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_compound-sim");

const SMALL: &str = "
name: small
master_seed: 3
horizon_ms: 120000
models:
  - id: emb
    cold_start_ms: 1000
    service_time: {deterministic: 50}
    mode: serverless
  - id: llm
    cold_start_ms: 4000
    service_time: {lognormal: {median_ms: 300, p95_ms: 600}}
    per_instance_concurrency: 4
    mode: serverless
pipelines:
  - id: rag
    latency_class: interactive
    nodes:
      - {id: e, model: emb}
      - {id: g, model: llm, depends_on: [e]}
workloads:
  - pipeline: rag
    process: {poisson: {rate_per_s: 2.0}}
";

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("spawn compound-sim")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn sim_writes_every_report() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.yaml"), SMALL).unwrap();
    let o = run(&["sim", "small.yaml", "--out", "r", "--event-log", "--run-log"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["summary.json", "pipelines.csv", "models.csv", "ledger.csv", "events.log", "runs.jsonl"] {
        assert!(tmp.path().join("r").join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("r/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["header"]["seed"], 3);
    assert_eq!(summary["header"]["scenario"], "small");
}

#[test]
fn overrides_land_in_the_header() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.yaml"), SMALL).unwrap();
    let o = run(&["sim", "small.yaml", "--seed", "9", "--horizon", "60000", "--set", "models.emb.cold_start_ms=2000", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("r/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["header"]["seed"], 9);
    assert_eq!(summary["header"]["horizon_ms"], 60000);
    let overrides = summary["header"]["overrides"].as_array().unwrap();
    assert!(overrides.iter().any(|v| v == "models.emb.cold_start_ms=2000"));
}

#[test]
fn runs_flag_writes_one_directory_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.yaml"), SMALL).unwrap();
    let o = run(&["sim", "small.yaml", "--runs", "3", "--seed", "10", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for s in 10..13 {
        assert!(tmp.path().join(format!("r/seed-{s}/summary.json")).is_file());
    }
    let agg = std::fs::read_to_string(tmp.path().join("r/aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 4);
}

#[test]
fn compare_identical_runs() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.yaml"), SMALL).unwrap();
    assert_eq!(code(&run(&["sim", "small.yaml", "--out", "a"], tmp.path())), 0);
    assert_eq!(code(&run(&["sim", "small.yaml", "--out", "b"], tmp.path())), 0);
    let o = run(&["compare", "a/summary.json", "b/summary.json", "--out", "c"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("rag"), "{table}");
    assert!(tmp.path().join("c/comparison.csv").is_file());
}

#[test]
fn replay_with_amplified_variance() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.yaml"), SMALL).unwrap();
    let mut trace = String::from("arrival_ms,pipeline_id,latency_class\n");
    for (i, t) in [0u64, 1000, 2200, 3000, 4500, 5400, 6600, 7500, 9000, 10000].iter().enumerate() {
        trace.push_str(&format!("{t},rag,{}\n", if i % 2 == 0 { "interactive" } else { "batch" }));
    }
    std::fs::write(tmp.path().join("trace.csv"), trace).unwrap();
    let o = run(&["replay", "trace.csv", "small.yaml", "--cov", "2", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("r/summary.json")).unwrap()).unwrap();
    let overrides = summary["header"]["overrides"].as_array().unwrap();
    assert!(overrides.iter().any(|v| v == "cov=2"));
    assert_eq!(summary["pipelines"][0]["requests"], 10);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("cyclic.yaml"), SMALL.replace("{id: e, model: emb}", "{id: e, model: emb, depends_on: [g]}")).unwrap();
    std::fs::write(dir.join("typo.yaml"), SMALL.replace("horizon_ms", "horizon")).unwrap();
    std::fs::write(dir.join("small.yaml"), SMALL).unwrap();
    std::fs::write(dir.join("trace.csv"), "arrival_ms,pipeline_id,latency_class\n0,nope,batch\n10,nope,batch\n").unwrap();

    for args in [
        &["sim", "cyclic.yaml"][..],
        &["sim", "typo.yaml"],
        &["sim", "missing.yaml"],
        &["scenario", "no-such-scenario"],
        &["compare", "missing-a.json", "missing-b.json"],
        &["replay", "trace.csv", "small.yaml"],
        &["sim", "small.yaml", "--set", "models.nope.cold_start_ms=1"],
    ] {
        let o = run(args, dir);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn scenario_list_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["scenario", "list"], tmp.path());
    assert_eq!(code(&o), 0);
    let names: Vec<String> = String::from_utf8_lossy(&o.stdout).lines().map(str::to_string).collect();
    assert_eq!(names.len(), compound_sim::canned::CATALOG.len());

    let o = run(&["scenario", "cascading-coldstart", "--export", "cfg"], tmp.path());
    assert_eq!(code(&o), 0);
    let o = run(&["sim", "cfg/cascading-coldstart.yaml", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn scenario_prints_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["scenario", "cascading-coldstart", "--out", "r"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("naive=180000 ms, coordinated=150000 ms, tiered=30000 ms"), "{text}");
    assert!(text.lines().last().unwrap().starts_with("PASS"));
    assert!(tmp.path().join("r/naive/summary.json").is_file());
}
