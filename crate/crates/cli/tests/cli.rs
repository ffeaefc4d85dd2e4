//! Black-box tests of the `kwf` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kwf_rerank::{rerank_arrays, Dataset, RerankOptions};
use serde_json::Value;
use tempfile::TempDir;

fn kwf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kwf"))
        .args(args)
        .output()
        .expect("spawn kwf")
}

fn ok(args: &[&str]) -> String {
    let out = kwf(args);
    assert!(
        out.status.success(),
        "kwf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the default synthetic dataset (seed 7) into a fresh directory.
fn synth() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", path(&data)]);
    (dir, data)
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn eval_json(data: &Path, out: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["eval", "--data", path(data), "--out", path(out)];
    args.extend_from_slice(extra);
    ok(&args);
    read_json(out)
}

fn metrics(v: &Value) -> (f64, f64, Vec<f64>) {
    let cmc = v["cmc"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    (
        v["rank1"].as_f64().unwrap(),
        v["map"].as_f64().unwrap(),
        cmc,
    )
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let (_dir, data) = synth();
    let ds = Dataset::load_dir(&data).unwrap();
    assert_eq!(
        (ds.num_queries(), ds.num_gallery(), ds.dim()),
        (50, 550, 64)
    );
    assert_eq!(read_json(&data.join("synth.json"))["seed"], 7);
}

#[test]
fn method_none_reports_stage1() {
    let (dir, data) = synth();
    let v = eval_json(&data, &dir.path().join("none.json"), &["--method", "none"]);
    assert_eq!(metrics(&v), metrics(&v["stage1"]));
}

#[test]
fn alpha_zero_matches_method_none() {
    let (dir, data) = synth();
    let none = eval_json(&data, &dir.path().join("none.json"), &["--method", "none"]);
    let zero = eval_json(&data, &dir.path().join("zero.json"), &["--alpha", "0"]);
    assert_eq!(metrics(&none), metrics(&zero));
}

#[test]
fn kwf_improves_the_seed_7_fixture() {
    let (dir, data) = synth();
    let v = eval_json(&data, &dir.path().join("kwf.json"), &[]);
    let (r1, map, _) = metrics(&v);
    let (s1_r1, s1_map, _) = metrics(&v["stage1"]);
    assert!(r1 > s1_r1 && map > s1_map, "{r1} {map} vs {s1_r1} {s1_map}");
    assert_eq!(v["version"], kwf_rerank::VERSION);
}

#[test]
fn config_rerun_reproduces_metrics() {
    let (dir, data) = synth();
    let first = eval_json(
        &data,
        &dir.path().join("a.json"),
        &[
            "--k",
            "4",
            "--m",
            "40",
            "--weighting",
            "expdecay",
            "--alpha",
            "0.7",
        ],
    );
    let report = dir.path().join("a.json");
    let out = dir.path().join("b.json");
    ok(&["eval", "--config", path(&report), "--out", path(&out)]);
    let second = read_json(&out);
    assert_eq!(metrics(&first), metrics(&second));
    assert_eq!(first["config"], second["config"]);
}

#[test]
fn dump_matches_the_library_entry_point() {
    let (dir, data) = synth();
    let dump = dir.path().join("dump.jsonl");
    ok(&[
        "eval",
        "--data",
        path(&data),
        "--dump",
        path(&dump),
        "--dump-depth",
        "550",
    ]);
    let ds = Dataset::load_dir(&data).unwrap();
    let cams = |m: &[kwf_rerank::ItemMeta]| m.iter().map(|x| x.camera_id).collect::<Vec<_>>();
    let lists = rerank_arrays(
        ds.query_features.values(),
        ds.gallery_features.values(),
        ds.dim(),
        &cams(&ds.query_meta),
        &cams(&ds.gallery_meta),
        &RerankOptions::default(),
    )
    .unwrap();
    let text = std::fs::read_to_string(&dump).unwrap();
    let records: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), lists.len());
    for ((rec, list), q) in records.iter().zip(&lists).zip(&ds.query_meta) {
        assert_eq!(rec["query_id"], q.image_id.as_str());
        let ids: Vec<&str> = rec["stage2"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_str().unwrap())
            .collect();
        let want: Vec<&str> = list
            .iter()
            .map(|&r| ds.gallery_meta[r].image_id.as_str())
            .collect();
        assert_eq!(ids, want);
    }
}

#[test]
fn sweep_writes_one_row_per_value() {
    let (dir, data) = synth();
    let csv = dir.path().join("k.csv");
    let reports = dir.path().join("reports");
    ok(&[
        "sweep",
        "--data",
        path(&data),
        "--axis",
        "k",
        "--values",
        "2..6:2",
        "--out",
        path(&csv),
        "--report-dir",
        path(&reports),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "value,rank1,map,mean_query_ms");
    assert_eq!(
        lines[1..]
            .iter()
            .map(|l| l.split(',').next().unwrap())
            .collect::<Vec<_>>(),
        ["2", "4", "6"]
    );
    for k in [2, 4, 6] {
        assert_eq!(
            read_json(&reports.join(format!("k_{k}.json")))["config"]["options"]["kwf"]["k"],
            k
        );
    }
    let alpha = ok(&[
        "sweep",
        "--data",
        path(&data),
        "--axis",
        "alpha",
        "--values",
        "0,0.5,1",
    ]);
    assert_eq!(alpha.lines().count(), 4);
}

#[test]
fn bench_with_one_repeat_has_zero_spread() {
    let (dir, data) = synth();
    let out = dir.path().join("bench.json");
    ok(&[
        "bench",
        "--data",
        path(&data),
        "--repeats",
        "1",
        "--out",
        path(&out),
    ]);
    let v = read_json(&out);
    assert_eq!(v["repeats"], 1);
    assert_eq!(v["wall_ms_std"].as_f64(), Some(0.0));
    assert_eq!(v["wall_ms"].as_array().unwrap().len(), 1);
}

#[test]
fn saved_index_gives_the_same_results() {
    let (dir, data) = synth();
    let idx = dir.path().join("ivf.idx");
    ok(&[
        "build-index",
        "--data",
        path(&data),
        "--index",
        "ivfflat",
        "--nlist",
        "8",
        "--out",
        path(&idx),
    ]);
    let built = eval_json(
        &data,
        &dir.path().join("a.json"),
        &["--index", "ivfflat", "--nlist", "8"],
    );
    let loaded = eval_json(
        &data,
        &dir.path().join("b.json"),
        &["--index-file", path(&idx)],
    );
    assert_eq!(metrics(&built), metrics(&loaded));
}

#[test]
fn exit_codes_distinguish_error_classes() {
    let (_dir, data) = synth();
    // input error: missing files
    assert_eq!(
        kwf(&["eval", "--data", "/nonexistent/kwf"]).status.code(),
        Some(2)
    );
    // config errors
    assert_eq!(
        kwf(&[
            "eval",
            "--data",
            path(&data),
            "--weighting",
            "uniform",
            "--p",
            "2"
        ])
        .status
        .code(),
        Some(3)
    );
    assert_eq!(
        kwf(&["eval", "--data", path(&data), "--alpha", "1.5"])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        kwf(&["eval", "--data", path(&data), "--k", "0"])
            .status
            .code(),
        Some(3)
    );
    assert_eq!(
        kwf(&[
            "sweep",
            "--data",
            path(&data),
            "--axis",
            "m",
            "--values",
            "1.5"
        ])
        .status
        .code(),
        Some(3)
    );
    assert_eq!(
        kwf(&["bench", "--data", path(&data), "--repeats", "0"])
            .status
            .code(),
        Some(3)
    );
    // a truncated feature file is an input error
    let broken = TempDir::new().unwrap();
    for f in ["query.npy", "query.csv", "gallery.npy", "gallery.csv"] {
        std::fs::copy(data.join(f), broken.path().join(f)).unwrap();
    }
    let bytes = std::fs::read(data.join("gallery.npy")).unwrap();
    std::fs::write(broken.path().join("gallery.npy"), &bytes[..bytes.len() / 2]).unwrap();
    let out = kwf(&["eval", "--data", path(broken.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}
