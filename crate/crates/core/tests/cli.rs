mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use pipetune::bench::presets;
use pipetune::engine::spec::{OperatorNode as N, PipelineSpec};
use pipetune::optimizer::TuningPlan;
use pipetune::tracer::{OpCounters, TraceSnapshot};

fn pipetune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipetune"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn snapshot() -> TraceSnapshot {
    let spec = PipelineSpec::new(
        "batch",
        vec![
            N::source("src", "imagenet_synth", 1000),
            N::map("map", "src", 1000.0, 1.0).with_parallelism(1),
            N::batch("batch", "map", 10),
        ],
    );
    let c = |completions, cpu_ns, bytes_read| OpCounters {
        completions,
        cpu_ns,
        bytes_produced: 1_000_000,
        bytes_read,
        parallelism: 1,
        ..OpCounters::default()
    };
    TraceSnapshot {
        wall_seconds: 1.0,
        spec,
        ops: BTreeMap::from([
            ("src".to_string(), c(1000, 0, 1_000_000)),
            ("map".to_string(), c(1000, 1_000_000_000, 0)),
            ("batch".to_string(), c(100, 0, 0)),
        ]),
        timestamp: 0.0,
        stores: None,
    }
}

fn predicted(out: &Output) -> f64 {
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    TuningPlan::from_json(&String::from_utf8_lossy(&out.stdout))
        .unwrap()
        .predicted()
}

#[test]
fn generated_spec_validates_and_bad_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        pipetune(d, &["gen", "--preset", "ssd_shape", "-o", "ssd.json"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        PipelineSpec::load(d.join("ssd.json")).unwrap(),
        presets::ssd_shape()
    );
    let ok = pipetune(d, &["validate", "ssd.json"]);
    assert_eq!(ok.status.code(), Some(0));

    assert_eq!(
        pipetune(d, &["validate", "missing.json"]).status.code(),
        Some(2)
    );
    std::fs::write(
        d.join("bad.json"),
        r#"{"root": "a", "nodes": [{"name": "a", "kind": "Map"}]}"#,
    )
    .unwrap();
    let bad = pipetune(d, &["validate", "bad.json"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!bad.stderr.is_empty());
    assert_eq!(
        pipetune(d, &["gen", "--preset", "nope"]).status.code(),
        Some(2)
    );
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pipetune(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(pipetune(dir.path(), &["optimize"]).status.code(), Some(1));
    assert_eq!(pipetune(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn flag_beats_config_beats_default() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    snapshot().dump(d.join("snap.json")).unwrap();
    std::fs::write(d.join("exp.conf"), "# budget\ncores = 4\n").unwrap();

    let default = predicted(&pipetune(d, &["optimize", "snap.json"]));
    let file = predicted(&pipetune(
        d,
        &["--config", "exp.conf", "optimize", "snap.json"],
    ));
    let flag = predicted(&pipetune(
        d,
        &[
            "--config",
            "exp.conf",
            "optimize",
            "snap.json",
            "--cores",
            "2",
        ],
    ));
    assert!((default - 1600.0).abs() < 1e-6, "{default}");
    assert!((file - 400.0).abs() < 1e-6, "{file}");
    assert!((flag - 200.0).abs() < 1e-6, "{flag}");

    std::fs::write(d.join("typo.conf"), "colors = 4\n").unwrap();
    let typo = pipetune(d, &["--config", "typo.conf", "optimize", "snap.json"]);
    assert_eq!(typo.status.code(), Some(2));
}

#[test]
fn optimize_writes_plan_and_rewritten_spec() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    snapshot().dump(d.join("snap.json")).unwrap();
    let out = pipetune(
        d,
        &[
            "optimize",
            "snap.json",
            "--cores",
            "8",
            "--plan-out",
            "plan.json",
            "-o",
            "opt.json",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let plan =
        TuningPlan::from_json(&std::fs::read_to_string(d.join("plan.json")).unwrap()).unwrap();
    let spec = PipelineSpec::load(d.join("opt.json")).unwrap();
    assert_eq!(plan.integer_parallelism["map"], 8);
    assert_eq!(spec.node("map").unwrap().parallelism, Some(8));
    spec.validated().unwrap();

    let analyzed = pipetune(d, &["analyze", "snap.json", "--table"]);
    assert_eq!(analyzed.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&analyzed.stdout).contains("map"));
}

#[test]
fn rewrite_edits_and_rejects_illegal_caches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    presets::resnet_shape().save(d.join("r.json")).unwrap();
    let out = pipetune(
        d,
        &[
            "rewrite",
            "r.json",
            "--set",
            "decode=6",
            "--prefetch-after",
            "crop:4",
            "--cache-after",
            "interleave",
            "-o",
            "w.json",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let spec = PipelineSpec::load(d.join("w.json")).unwrap();
    assert_eq!(spec.node("decode").unwrap().parallelism, Some(6));
    assert_eq!(spec.nodes.len(), 7);

    assert_eq!(
        pipetune(d, &["rewrite", "r.json", "--cache-after", "crop"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        pipetune(d, &["rewrite", "r.json", "--set", "batch=2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        pipetune(d, &["rewrite", "r.json", "--set", "decode"])
            .status
            .code(),
        Some(2)
    );
}
