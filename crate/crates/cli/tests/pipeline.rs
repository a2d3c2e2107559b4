mod common;

use std::path::Path;

use common::*;
use serde_json::{json, Value};
use voxstream_cli::pipeline::{load_config, run_bulk, run_pipeline, Override, PipelineConfig, RunOptions, MANIFEST_FILE};
use voxstream_cli::CliError;

fn blob_config() -> PipelineConfig {
    serde_json::from_value(json!({
        "steps": [
            { "op": "import", "inputs": ["${dataset}"], "outputs": ["raw"] },
            { "op": "threshold", "params": { "lo": 100, "hi": 255 }, "inputs": ["raw"], "outputs": ["mask"] },
            { "op": "cca", "params": { "connectivity": 26 }, "inputs": ["mask"], "outputs": ["labels", "table.json"] },
            { "op": "csv", "inputs": ["table.json"], "outputs": ["components.csv"] }
        ]
    }))
    .unwrap()
}

fn csv_sizes(path: &Path) -> Vec<u64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "voxels").unwrap();
    let mut sizes: Vec<u64> = lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    sizes.sort();
    sizes
}

fn opts(base: &Path, out: &Path, dataset: &str) -> RunOptions {
    let mut o = RunOptions::new(base, out);
    o.overrides = vec![format!("dataset={dataset}").parse().unwrap()];
    o
}

#[test]
fn import_threshold_cca_csv_counts_blobs() {
    let tmp = tempfile::tempdir().unwrap();
    write_blob_tiffs(&tmp.path().join("blobs"));
    let out = tmp.path().join("run");
    let m = run_pipeline(&blob_config(), &opts(tmp.path(), &out, "blobs")).unwrap();
    assert_eq!(m.status, "done");
    assert_eq!(m.steps.len(), 4);
    assert_eq!(csv_sizes(&out.join("components.csv")), blob_sizes());
    assert_eq!(m.steps[2].report["components"], json!(3));
    let on_disk: Value = serde_json::from_slice(&std::fs::read(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk["status"], "done");
    let leftovers: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn override_changes_parameter_and_is_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    write_blob_tiffs(&tmp.path().join("blobs"));
    let out = tmp.path().join("run");
    let mut o = opts(tmp.path(), &out, "blobs");
    o.overrides.push("threshold.lo=250".parse().unwrap());
    let m = run_pipeline(&blob_config(), &o).unwrap();
    assert_eq!(m.resolved.steps[1].params["lo"], json!(250));
    assert_eq!(m.config.steps[1].params["lo"], json!(100));
    assert!(m.overrides.iter().any(|x| x.key == "threshold.lo" && x.value == json!(250)));
    assert!(csv_sizes(&out.join("components.csv")).is_empty());
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["overrides"][1]["key"], "threshold.lo");
    assert_eq!(manifest["resolved"]["steps"][1]["params"]["lo"], 250);
}

#[test]
fn override_parsing() {
    let o: Override = "a.b=10".parse().unwrap();
    assert_eq!(o.value, json!(10));
    let o: Override = "a.b=[1,2]".parse().unwrap();
    assert_eq!(o.value, json!([1, 2]));
    let o: Override = "name=some text".parse().unwrap();
    assert_eq!(o.value, json!("some text"));
    assert!(matches!("novalue".parse::<Override>(), Err(CliError::Config(_))));
    assert!(matches!("=3".parse::<Override>(), Err(CliError::Config(_))));
    let mut c = blob_config();
    assert!(matches!(
        c.apply_overrides(&["nosuchstep.lo=1".parse().unwrap()]),
        Err(CliError::Config(_))
    ));
    c.apply_overrides(&["cca.extra.deep=1".parse().unwrap()]).unwrap();
    assert_eq!(c.steps[2].params["extra"]["deep"], json!(1));
}

#[test]
fn cyclic_graph_fails_before_execution() {
    let tmp = tempfile::tempdir().unwrap();
    write_blob_tiffs(&tmp.path().join("blobs"));
    let cfg: PipelineConfig = serde_json::from_value(json!({
        "steps": [
            { "op": "import", "inputs": ["blobs"], "outputs": ["raw"] },
            { "name": "a", "op": "gaussian", "params": { "sigma": 1.0 }, "inputs": ["y"], "outputs": ["x"] },
            { "name": "b", "op": "gaussian", "params": { "sigma": 1.0 }, "inputs": ["x"], "outputs": ["y"] }
        ]
    }))
    .unwrap();
    let out = tmp.path().join("run");
    let err = run_pipeline(&cfg, &RunOptions::new(tmp.path(), &out)).unwrap_err();
    assert!(matches!(&err, CliError::Config(m) if m.contains("cycle")), "{err}");
    assert_eq!(err.to_json()["error"], "ConfigError");
    assert!(!out.exists(), "nothing may run before validation");
}

#[test]
fn invalid_configs_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = [
        json!({ "steps": [] }),
        json!({ "steps": [{ "op": "nosuchop", "inputs": ["a"], "outputs": ["b"] }] }),
        json!({ "steps": [{ "op": "cca", "inputs": [], "outputs": ["b"] }] }),
        json!({ "steps": [{ "op": "stats", "inputs": ["missing"], "outputs": ["s.json"] }] }),
        json!({ "steps": [
            { "name": "s", "op": "stats", "inputs": ["x"], "outputs": ["a"] },
            { "name": "s", "op": "stats", "inputs": ["x"], "outputs": ["b"] }
        ] }),
        json!({ "steps": [
            { "name": "first", "op": "stats", "inputs": ["later"], "outputs": ["a"] },
            { "name": "second", "op": "gaussian", "inputs": ["a"], "outputs": ["later"] }
        ] }),
        json!({ "steps": [{ "op": "stats", "inputs": ["${undefined}"], "outputs": ["a"] }] }),
    ];
    for cfg in bad {
        let cfg: PipelineConfig = serde_json::from_value(cfg.clone()).unwrap();
        let err = run_pipeline(&cfg, &RunOptions::new(tmp.path(), tmp.path().join("out"))).unwrap_err();
        assert!(matches!(err, CliError::Config(_)), "{err}");
    }
    assert!(PipelineConfig::from_json(br#"{"steps": [], "unknown": 1}"#).is_err());
}

#[test]
fn failure_keeps_earlier_outputs_and_reports_step() {
    let tmp = tempfile::tempdir().unwrap();
    write_blob_tiffs(&tmp.path().join("blobs"));
    let out = tmp.path().join("run");
    let mut o = opts(tmp.path(), &out, "blobs");
    o.overrides.push("cca.connectivity=7".parse().unwrap());
    let err = run_pipeline(&blob_config(), &o).unwrap_err();
    let j = err.to_json();
    assert_eq!(j["error"], "StepError");
    assert_eq!(j["step"], "cca");
    assert_eq!(j["cause"]["error"], "InvalidParameter");
    assert!(out.join("raw").join("meta.json").exists());
    assert!(out.join("mask").join("meta.json").exists());
    assert!(!out.join("labels").exists());
    assert!(!out.join("table.json").exists());
    let names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().all(|n| !n.ends_with(".partial")), "{names:?}");
    let manifest: Value = serde_json::from_slice(&std::fs::read(out.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert_eq!(manifest["error"]["step"], "cca");
    assert_eq!(manifest["steps"].as_array().unwrap().len(), 3);
}

#[test]
fn cancellation_leaves_no_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    write_blob_tiffs(&tmp.path().join("blobs"));
    let out = tmp.path().join("run");
    let o = opts(tmp.path(), &out, "blobs");
    o.job.cancel();
    let err = run_pipeline(&blob_config(), &o).unwrap_err();
    assert!(err.is_cancelled());
    let names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(names, vec![MANIFEST_FILE.to_string()]);
}

#[test]
fn manifest_replays_bit_identically() {
    let tmp = tempfile::tempdir().unwrap();
    write_blob_tiffs(&tmp.path().join("blobs"));
    let first = tmp.path().join("first");
    let mut o = opts(tmp.path(), &first, "blobs");
    o.overrides.push("threshold.lo=150".parse().unwrap());
    run_pipeline(&blob_config(), &o).unwrap();

    let (cfg, overrides, seed) = load_config(&first.join(MANIFEST_FILE)).unwrap();
    let second = tmp.path().join("second");
    let mut o2 = RunOptions::new(tmp.path(), &second);
    o2.overrides = overrides;
    o2.seed = seed.unwrap();
    run_pipeline(&cfg, &o2).unwrap();

    let strip = |v: Vec<(std::path::PathBuf, Vec<u8>)>| -> Vec<(std::path::PathBuf, Vec<u8>)> {
        v.into_iter().filter(|(p, _)| p != Path::new(MANIFEST_FILE)).collect()
    };
    let (a, b) = (strip(read_tree(&first)), strip(read_tree(&second)));
    assert!(!a.is_empty());
    assert_eq!(a.iter().map(|x| &x.0).collect::<Vec<_>>(), b.iter().map(|x| &x.0).collect::<Vec<_>>());
    for ((p, x), (_, y)) in a.iter().zip(&b) {
        if p.file_name().is_some_and(|n| n == "meta.json") {
            continue;
        }
        assert!(x == y, "{} differs", p.display());
    }
}

#[test]
fn bulk_run_isolates_datasets_and_survives_failures() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        write_blob_tiffs(&tmp.path().join(d));
    }
    write_corrupt_tiffs(&tmp.path().join("broken"));
    let datasets: Vec<String> = ["a", "broken", "b"].map(String::from).to_vec();
    for concurrency in [1, 3] {
        let out = tmp.path().join(format!("bulk{concurrency}"));
        let summary = run_bulk(&blob_config(), &datasets, &RunOptions::new(tmp.path(), &out), concurrency).unwrap();
        assert_eq!((summary.done, summary.failed), (2, 1));
        assert_eq!(summary.datasets[1].status, "failed");
        assert_eq!(summary.datasets[1].dataset, "broken");
        assert!(summary.datasets[1].error.is_some());
        for d in ["a", "b"] {
            assert_eq!(csv_sizes(&out.join(d).join("components.csv")), blob_sizes());
        }
        assert!(!out.join("broken").join("components.csv").exists());
        let on_disk: Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(on_disk["done"], 2);
        assert_eq!(on_disk["failed"], 1);
        assert_eq!(on_disk["datasets"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn bulk_with_empty_list_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_bulk(&blob_config(), &[], &RunOptions::new(tmp.path(), tmp.path().join("o")), 1).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
}

#[test]
fn bulk_rejects_structural_errors_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    write_blob_tiffs(&tmp.path().join("a"));
    let mut cfg = blob_config();
    cfg.steps[3].inputs = vec!["components.csv".into()];
    let out = tmp.path().join("o");
    let err = run_bulk(&cfg, &["a".into()], &RunOptions::new(tmp.path(), &out), 1).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
    assert!(!out.join("a").exists());
}

#[test]
fn duplicate_dataset_names_get_distinct_directories() {
    let tmp = tempfile::tempdir().unwrap();
    write_blob_tiffs(&tmp.path().join("x").join("blobs"));
    write_blob_tiffs(&tmp.path().join("y").join("blobs"));
    let out = tmp.path().join("o");
    let summary = run_bulk(
        &blob_config(),
        &["x/blobs".into(), "y/blobs".into()],
        &RunOptions::new(tmp.path(), &out),
        2,
    )
    .unwrap();
    assert_eq!(summary.done, 2);
    assert_ne!(summary.datasets[0].output, summary.datasets[1].output);
}

#[test]
fn other_ops_run_through_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    write_blob_tiffs(&tmp.path().join("blobs"));
    let cfg: PipelineConfig = serde_json::from_value(json!({
        "variables": { "src": "blobs" },
        "steps": [
            { "op": "import", "inputs": ["${src}"], "outputs": ["raw"] },
            { "op": "filter", "params": { "stack": [
                { "filter": "gaussian", "sigma": 0.8 },
                { "filter": "threshold", "lo": 100, "hi": 255 }
            ] }, "inputs": ["raw"], "outputs": ["mask"] },
            { "op": "fill_cavities", "inputs": ["mask"], "outputs": ["filled"] },
            { "op": "filter_components", "params": { "min_voxels": 200 }, "inputs": ["filled"], "outputs": ["big"] },
            { "op": "quantify", "params": { "mode": "dice" }, "inputs": ["mask", "big"], "outputs": ["dice.json"] },
            { "op": "stats", "inputs": ["raw"], "outputs": ["stats.json"] },
            { "op": "octree", "params": { "brick_size": 16 }, "inputs": ["raw"], "outputs": ["tree"] }
        ]
    }))
    .unwrap();
    let out = tmp.path().join("run");
    run_pipeline(&cfg, &RunOptions::new(tmp.path(), &out)).unwrap();
    let dice: Value = serde_json::from_slice(&std::fs::read(out.join("dice.json")).unwrap()).unwrap();
    let d = dice["dice"].as_f64().unwrap();
    assert!(d > 0.5 && d < 1.0, "small blob dropped, dice {d}");
    let stats: Value = serde_json::from_slice(&std::fs::read(out.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats[0]["min"], json!(BACKGROUND as f64));
    assert_eq!(stats[0]["max"], json!(BLOB_VALUE as f64));
    assert!(out.join("tree").is_dir());
}
