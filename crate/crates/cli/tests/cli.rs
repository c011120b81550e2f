use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slicewise"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas")
}

/// Parses `file` and checks it against `docs/schemas/<schema>`.
fn validated(file: &Path, schema: &str) -> Value {
    let doc: Value = serde_json::from_str(&fs::read_to_string(file).unwrap()).unwrap();
    let schema: Value = serde_json::from_str(&fs::read_to_string(schema_dir().join(schema)).unwrap()).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    if let Err(errors) = compiled.validate(&doc) {
        let msgs: Vec<String> = errors.map(|e| format!("{}: {e}", e.instance_path)).collect();
        panic!("{} fails {schema}: {msgs:?}", file.display());
    }
    doc
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn decaying_csv(k: usize, rate: f64) -> String {
    let mut text = String::from("step");
    for j in 0..k {
        text.push_str(&format!(",{j}"));
    }
    text.push('\n');
    for i in 0..k {
        text.push_str(&i.to_string());
        for j in 0..k {
            let v: f64 = (-rate * (i as f64 - j as f64).abs()).exp();
            text.push_str(&format!(",{v:?}"));
        }
        text.push('\n');
    }
    text
}

#[test]
fn run_writes_a_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--mode", "reference", "--steps", "2", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = validated(&dir.path().join("out/report.json"), "run_report.schema.json");
    assert_eq!(report["mode"], "reference");
    assert_eq!(report["op_counts"].as_array().unwrap().len(), 2);
    assert!(report["spatial_k"].is_null());
    // nothing is written outside the output directory
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec!["out"]);
}

#[test]
fn zero_spatial_k_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--mode", "slicedloop", "--spatial-k", "0", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("spatial-k must be ≥ 1"), "{}", stderr(&o));
}

#[test]
fn unknown_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--out", "out", "--frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pipelined_and_sliced_runs_share_a_checksum() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["pipelined", "slicedloop"] {
        let o = run(&["run", "--mode", mode, "--steps", "2", "--out", mode], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = validated(&dir.path().join("pipelined/report.json"), "run_report.schema.json");
    let b = validated(&dir.path().join("slicedloop/report.json"), "run_report.schema.json");
    assert_eq!(a["output_checksum"], b["output_checksum"]);
    assert_eq!(a["peak_bytes"], b["peak_bytes"]);
    assert!(a["pipeline_ticks"].as_u64().unwrap() > 0);
}

#[test]
fn compare_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["compare", "--steps", "2", "--out", "a"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = validated(&dir.path().join("a/compare.json"), "compare.schema.json");
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r["max_rel_error"], 0.0);
        assert_eq!(r["diverged"], false);
    }
    assert!(rows[1]["peak_ratio"].as_f64().unwrap() < 0.6);

    let o = run(&["compare", "--steps", "2", "--modes", "reference,naiveclip", "--out", "b"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = validated(&dir.path().join("b/compare.json"), "compare.schema.json");
    assert_eq!(doc["rows"][1]["diverged"], true);

    let o = run(&["compare", "--steps", "1", "--modes", "reference", "--out", "c"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = validated(&dir.path().join("c/compare.json"), "compare.schema.json");
    assert_eq!(doc["rows"].as_array().unwrap().len(), 1);
    assert_eq!(doc["rows"][0]["max_abs_error"], 0.0);
    assert_eq!(doc["rows"][0]["peak_ratio"], 1.0);
}

#[test]
fn similarity_maps_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["similarity", "--steps", "1", "--out", "one"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("one/similarity.up_blocks.3.temporal.0.csv")).unwrap();
    assert_eq!(csv, "step,0\n0,1.0\n");

    let o = run(
        &["similarity", "--steps", "3", "--probe", "up_blocks.3.temporal.0", "--probe", "mid_block.temporal.0", "--out", "two"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = validated(&dir.path().join("two/similarity_summary.json"), "similarity_summary.schema.json");
    assert_eq!(summary["probes"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("two/similarity.mid_block.temporal.0.csv").exists());
}

#[test]
fn search_steps() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("ones.csv"), decaying_csv(6, 0.0)).unwrap();
    let o = run(&["search-steps", "--similarity", "ones.csv", "--gamma", "0.95", "--out", "ones"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = validated(&dir.path().join("ones/schedule.json"), "schedule.schema.json");
    assert_eq!(doc["key_steps"], serde_json::json!([0, 5]));

    fs::write(dir.path().join("decay.csv"), decaying_csv(25, 0.01)).unwrap();
    let o = run(&["search-steps", "--similarity", "decay.csv", "--target-count", "13", "--out", "t"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let doc = validated(&dir.path().join("t/schedule.json"), "schedule.schema.json");
    assert_eq!(doc["K"], 25);
    assert_eq!(doc["key_steps"].as_array().unwrap().len(), 13);

    let o = run(&["search-steps", "--similarity", "decay.csv", "--gamma", "1.01", "--out", "bad"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma must be in (0,1]"), "{}", stderr(&o));

    let o = run(&["search-steps", "--similarity", "ones.csv", "--target-count", "3", "--out", "none"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn run_with_target_count_skips_steps() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--steps", "6", "--target-count", "4", "--out", "r"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = validated(&dir.path().join("r/report.json"), "run_report.schema.json");
    let sched = validated(&dir.path().join("r/schedule.json"), "schedule.schema.json");
    assert_eq!(sched["key_steps"].as_array().unwrap().len(), 4);
    assert!(report["node_evals"].as_u64().unwrap() < report["full_node_evals"].as_u64().unwrap());
    assert!(report["max_rel_error"].as_f64().unwrap() > 0.0);
    let summary = &report["similarity_summary"];
    assert_eq!(summary["metric"], "cosine");

    let o = run(&["run", "--steps", "4", "--key-steps", "0,3", "--out", "k"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["run", "--steps", "4", "--key-steps", "1,3", "--out", "k2"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn profile_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["profile", "--steps", "1", "--mode", "pipelined", "--out", "p"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let p = dir.path().join("p");
    validated(&p.join("graph.json"), "graph.schema.json");
    let groups = validated(&p.join("groups.json"), "groups.schema.json");
    assert!(!groups["groups"].as_array().unwrap().is_empty());
    let tail = validated(&p.join("tail.json"), "tail.schema.json");
    assert_eq!(tail["probe"], "up_blocks.3.temporal.0");
    validated(&p.join("report.json"), "run_report.schema.json");
    let timeline = fs::read_to_string(p.join("timeline.pipelined.csv")).unwrap();
    assert!(timeline.starts_with("tick,delta_bytes,cumulative_bytes,tag,peak\n"));
    assert!(fs::metadata(p.join("weights.bin")).unwrap().len() > 0);
}

#[test]
fn config_files_are_schema_checked() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"mode": "reference", "spatial-k": 4}"#).unwrap();
    let o = run(&["run", "--config", "bad.json", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("spatial-k"), "{}", stderr(&o));

    fs::write(dir.path().join("low.json"), r#"{"unet": {"steps": 2, "frames": 0}}"#).unwrap();
    let o = run(&["run", "--config", "low.json", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/unet/frames"), "{}", stderr(&o));

    let good = r#"{
        "unet": {"frames": 4, "height": 16, "width": 16, "steps": 2, "seed": 3},
        "mode": "slicedloop",
        "spatial_k": 2,
        "temporal": {"fixed": {"k_h": 4, "k_w": 2}},
        "dtype": "f64"
    }"#;
    fs::write(dir.path().join("good.json"), good).unwrap();
    let o = run(&["run", "--config", "good.json", "--mode", "pipelined", "--out", "g"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = validated(&dir.path().join("g/report.json"), "run_report.schema.json");
    assert_eq!(report["mode"], "pipelined");
    assert_eq!(report["dtype"], "f64");
    assert_eq!(report["seed"], 3);
    assert_eq!(report["temporal"], serde_json::json!({"fixed": {"k_h": 4, "k_w": 2}}));
}
