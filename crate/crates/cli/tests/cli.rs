use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kvflow::experiment::{CompareRow, Comparison, RowStatus};
use kvflow::metrics::MetricsReport;
use serde_json::Value;

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn kvflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvflow"))
        .args(args)
        .current_dir(presets())
        .output()
        .unwrap()
}

fn ok(out: &Output) -> &Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> String {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(presets().join("synthetic_known.json")).unwrap()).unwrap();
    v["workload"]["horizon"] = 500.into();
    edit(&mut v);
    let path = dir.join("config.json");
    fs::write(&path, v.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_one_report_per_seed_and_appends_sweep_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    ok(&kvflow(&["run", "--config", "synthetic_known.json", "--out", out_s]));
    for seed in 1..=5 {
        assert!(out.join(format!("metrics_seed{seed}.json")).exists());
    }
    let jsons = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".json"))
        .count();
    assert_eq!(jsons, 5);

    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 2);
    ok(&kvflow(&["run", "--config", "synthetic_known.json", "--out", out_s, "--seed", "9"]));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.lines().nth(2).unwrap().starts_with("\"flow-known[4,4,4]\",1,"));
}

#[test]
fn metrics_csv_matches_json_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&kvflow(&["run", "--config", "synthetic_unknown.json", "--out", out.to_str().unwrap(), "--seed", "4", "--seed", "8"]));
    let from_csv = MetricsReport::read_csv(fs::File::open(out.join("metrics.csv")).unwrap()).unwrap();
    let from_json: Vec<MetricsReport> = [4, 8]
        .iter()
        .map(|s| serde_json::from_str(&fs::read_to_string(out.join(format!("metrics_seed{s}.json"))).unwrap()).unwrap())
        .collect();
    assert_eq!(from_csv, from_json);
}

#[test]
fn emit_flags_control_series_and_event_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |v| {
        v["emit"] = serde_json::json!({"metrics_json": false, "metrics_csv": false, "series_csv": true, "event_log": true});
    });
    let out = dir.path().join("out");
    ok(&kvflow(&["run", "--config", &config, "--out", out.to_str().unwrap(), "--seed", "2"]));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["events_seed2.csv", "series_seed2.csv", "sweep.csv"]);
    let events = fs::read_to_string(out.join("events_seed2.csv")).unwrap();
    assert_eq!(events.lines().next().unwrap(), "slot,event,request_id,usage_after");
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let no_policy = write_config(dir.path(), |v| {
        v.as_object_mut().unwrap().remove("policy");
    });
    let out = kvflow(&["run", "--config", &no_policy]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("policy"));

    let no_seeds = write_config(dir.path(), |v| v["seeds"] = serde_json::json!([]));
    let out = kvflow(&["run", "--config", &no_seeds]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let unknown = write_config(dir.path(), |v| v["policy"] = serde_json::json!({"name": "fifo"}));
    assert_eq!(kvflow(&["run", "--config", &unknown]).status.code(), Some(2));

    assert_eq!(kvflow(&["run", "--config", "synthetic_known.json", "--jobs", "0"]).status.code(), Some(2));
    assert_eq!(kvflow(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // A prompt larger than the cache is only discovered when it arrives.
    let config = write_config(dir.path(), |v| {
        v["workload"]["classes"][0]["prompt_len"] = 20000.into();
    });
    let out = kvflow(&["run", "--config", &config]);
    assert_eq!(out.status.code(), Some(1), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn compare_six_policies_gives_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&kvflow(&["compare", "--config", "synthetic_known.json", "--seed", "1", "--out", out.to_str().unwrap()]));
    let rows = Comparison::read_csv(fs::File::open(out.join("compare.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.status == RowStatus::Ok));
    let json: Vec<CompareRow> = serde_json::from_str(&fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
    assert_eq!(rows, json);
    let mut series = csv::Reader::from_path(out.join("usage_series.csv")).unwrap();
    assert_eq!(series.headers().unwrap().len(), 7);
}

#[test]
fn compare_single_policy_and_unknown_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let single = write_config(dir.path(), |v| {
        v["policies"] = serde_json::json!([]);
    });
    let out = ok(&kvflow(&["compare", "--config", &single, "--seed", "1"])).stdout.clone();
    let rows = Comparison::read_csv(out.as_slice()).unwrap();
    assert_eq!(rows.len(), 1);

    let out = ok(&kvflow(&["compare", "--config", "synthetic_unknown.json", "--seed", "1"])).stdout.clone();
    let rows = Comparison::read_csv(out.as_slice()).unwrap();
    assert_eq!(rows.len(), 5);
    let mcsf = rows.iter().find(|r| r.policy == "mc-sf").unwrap();
    assert_eq!(mcsf.status, RowStatus::Inapplicable);
    assert!(rows.iter().filter(|r| r.policy != "mc-sf").all(|r| r.status == RowStatus::Ok));
}

#[test]
fn compare_refuses_mismatched_workloads() {
    let dir = tempfile::tempdir().unwrap();
    let other = write_config(dir.path(), |v| v["kv_capacity"] = 20000.into());
    let out = kvflow(&["compare", "--config", "synthetic_known.json", "--config", &other]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stability_reports_without_gating() {
    let known: Value = serde_json::from_slice(&ok(&kvflow(&["stability", "--config", "synthetic_known.json"])).stdout).unwrap();
    assert_eq!(known["sufficient_holds"], true);
    assert_eq!(known["sufficient"]["budgeted_load"], 16240);

    let over: Value =
        serde_json::from_slice(&ok(&kvflow(&["stability", "--config", "synthetic_overloaded.json"])).stdout).unwrap();
    assert_eq!(over["necessary_violated"], true);
    assert_eq!(over["offered_load_exact"], "20300");

    let trace: Value = serde_json::from_slice(&ok(&kvflow(&["stability", "--config", "trace_lambda50.json"])).stdout).unwrap();
    // 50 * 26040077/1000 from the fixture's empirical mean
    assert_eq!(trace["offered_load_exact"], "26040077/20");
    assert!(trace["notes"][0].as_str().unwrap().contains("1000 trace records"));
}

#[test]
fn budget_search_picks_argmax_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), |_| {});
    let args = ["budget-search", "--config", config.as_str(), "--seed", "1", "--seed", "2"];
    let first = ok(&kvflow(&args)).stdout.clone();
    let out = dir.path().join("out");
    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.to_str().unwrap(), "--format", "json"]);
    let result: Value = serde_json::from_slice(&ok(&kvflow(&with_out)).stdout).unwrap();
    assert_eq!(ok(&kvflow(&args)).stdout, first);
    let rows = result["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    // Ties go to the earliest grid point.
    let value = |r: &Value| r["objective_value"].as_f64().unwrap();
    let best = rows.iter().fold(&rows[0], |best, r| if value(r) > value(best) { r } else { best });
    assert_eq!(result["best_budget"], best["budget"]);
    assert!(out.join("budget_search.csv").exists());
}

#[test]
fn oracle_solves_witness_instance() {
    let v: Value =
        serde_json::from_slice(&ok(&kvflow(&["oracle", "--config", "oracle_witness.json", "--check-policies"])).stdout)
            .unwrap();
    assert_eq!(v["solution"]["value"], 1.0);
    let witnesses = v["dominance"].as_array().unwrap();
    assert_eq!(witnesses.len(), 6);
    assert!(witnesses.iter().all(|w| w["holds"] == true));
}

#[test]
fn ingest_raw_pairs_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let first: Value = serde_json::from_slice(
        &ok(&kvflow(&["ingest", "--input", "traces/sample_pairs.jsonl", "--trace-format", "raw_pairs", "--out", out.to_str().unwrap()]))
            .stdout,
    )
    .unwrap();
    assert_eq!(first["records"], 40);
    let again: Value =
        serde_json::from_slice(&ok(&kvflow(&["ingest", "--input", out.join("trace.jsonl").to_str().unwrap()])).stdout)
            .unwrap();
    assert_eq!(first["summary"], again["summary"]);
}
