mod common;

use pipetune::bench::{self, presets, TuneConfig};
use pipetune::engine::spec::{OperatorNode as N, PipelineSpec};
use pipetune::optimizer::{DiskBudget, ResourceBudget};

use common::{store, timing_lock};

fn config(steps: usize) -> TuneConfig {
    let mut cfg = TuneConfig::new(
        ResourceBudget::new(4.0, 0, DiskBudget::Unlimited).unwrap(),
        steps,
    );
    cfg.trace_seconds = 0.5;
    cfg.warmup_seconds = 0.2;
    cfg
}

#[test]
fn zero_steps_records_only_the_baseline() {
    let _t = timing_lock();
    let spec = presets::linear_chain(3).unwrap();
    let stores = pipetune::storage::StoreRegistry::with_builtins();
    let h = bench::iterative_tune(&spec, &stores, &config(0)).unwrap();
    assert_eq!(h.records.len(), 1);
    assert_eq!(h.records[0].step, 0);
    assert!(h.records[0].node.is_none());
    assert!(h.records[0].parallelism.values().all(|&p| p == 1));
}

#[test]
fn single_knob_walk_matches_iterative() {
    let _t = timing_lock();
    let spec = PipelineSpec::new(
        "map",
        vec![
            N::source("src", "s", 100),
            N::map("map", "src", 500.0, 1.0).with_parallelism(1),
        ],
    );
    let stores = store("s", 1, 100 * 1_000_000);
    let a = bench::iterative_tune(&spec, &stores, &config(3)).unwrap();
    let b = bench::random_walk(&spec, &stores, &config(3), 5).unwrap();
    let knobs = |h: &bench::TuneHistory| -> Vec<u32> {
        h.records.iter().map(|r| r.parallelism["map"]).collect()
    };
    assert_eq!(knobs(&a), vec![1, 2, 3, 4]);
    assert_eq!(knobs(&a), knobs(&b));
}

#[test]
fn no_knobs_yields_a_diagnostic() {
    let spec = PipelineSpec::new("src", vec![N::source("src", "s", 100)]);
    let h = bench::iterative_tune(&spec, &store("s", 1, 10_000), &config(3)).unwrap();
    assert!(h.records.is_empty());
    assert!(h.diagnostic.is_some());
}

#[test]
fn random_walk_is_reproducible_per_seed() {
    let _t = timing_lock();
    let spec = presets::linear_chain(4).unwrap();
    let stores = pipetune::storage::StoreRegistry::with_builtins();
    let picks = |seed| -> Vec<Option<String>> {
        bench::random_walk(&spec, &stores, &config(4), seed)
            .unwrap()
            .records
            .into_iter()
            .map(|r| r.node)
            .collect()
    };
    assert_eq!(picks(3), picks(3));
}

#[test]
fn subsample_error_is_zero_for_uniform_sizes() {
    let errs = bench::subsample_errors(&[1000; 500], 5, 0..10).unwrap();
    assert!(errs.iter().all(|&e| e < 1e-12));
}
