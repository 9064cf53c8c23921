mod common;

use std::collections::BTreeMap;

use pipetune::bench::{naive_configuration, presets};
use pipetune::engine::{CpuModel, EngineOptions, StableOptions};
use pipetune::optimizer::{
    self, solve_cpu_lp, BindingConstraint, DiskBudget, LiveOptions, ResourceBudget,
};
use pipetune::rates::{randomness_closure, RateModel};
use pipetune::storage::StoreRegistry;

use common::{lattice_optimum, random_lp, timing_lock, GraphGen};

const GB: u64 = 1_000_000_000;

#[test]
fn closed_form_matches_lattice_search() {
    for seed in 0..100 {
        let (terms, cores) = random_lp(seed);
        let x = solve_cpu_lp(&terms, cores).unwrap().throughput;
        let grid = lattice_optimum(&terms, cores, 0.01);
        assert!(
            grid <= x * (1.0 + 1e-9),
            "seed {seed}: lattice {grid} beats {x}"
        );
        assert!((x - grid) / x <= 0.01, "seed {seed}: {x} vs {grid}");
    }
}

#[test]
fn allocation_is_feasible() {
    for seed in 100..300 {
        let (terms, cores) = random_lp(seed);
        let s = solve_cpu_lp(&terms, cores).unwrap();
        let used: f64 = terms.iter().map(|t| t.weight * s.theta[&t.name]).sum();
        assert!(
            used <= cores * (1.0 + 1e-9),
            "seed {seed}: {used} > {cores}"
        );
        for t in &terms {
            let th = s.theta[&t.name];
            assert!(th * t.rate >= s.throughput * (1.0 - 1e-9));
            if t.sequential {
                assert!(th <= 1.0 + 1e-9);
            }
        }
        match &s.binding {
            BindingConstraint::Cpu => assert!((used / cores - 1.0).abs() < 1e-9),
            BindingConstraint::Sequential(n) => assert!((s.theta[n] - 1.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }
}

fn budget(cores: f64, memory: u64) -> ResourceBudget {
    ResourceBudget::new(cores, memory, DiskBudget::Unlimited).unwrap()
}

fn models(seed: u64, count: usize, chain: bool) -> Vec<RateModel> {
    let mut g = GraphGen::new(seed);
    g.chain = chain;
    (0..count)
        .map(|_| {
            let spec = g.spec(5);
            let snap = g.snapshot(&spec);
            let sizes = BTreeMap::from([("s".to_string(), 1e10)]);
            RateModel::with_store_sizes(&snap, &sizes).unwrap()
        })
        .collect()
}

#[test]
fn caching_never_lowers_the_prediction() {
    for (i, m) in models(7, 200, false).iter().enumerate() {
        let none = optimizer::plan_with_cache(m, &budget(16.0, 0), None).unwrap();
        let cached = optimizer::plan(m, &budget(16.0, u64::MAX)).unwrap();
        assert!(
            cached.predicted() >= none.predicted() * (1.0 - 1e-9),
            "graph {i}"
        );
    }
}

#[test]
fn nearer_root_cache_sites_dominate() {
    let b = budget(16.0, 0);
    for (i, m) in models(10, 100, true).iter().enumerate() {
        let depths = m.spec.depths();
        let mut sites: Vec<(usize, f64)> = optimizer::place_cache_candidates(m)
            .iter()
            .map(|n| {
                (
                    depths[n],
                    optimizer::plan_with_cache(m, &b, Some(n))
                        .unwrap()
                        .predicted(),
                )
            })
            .collect();
        sites.sort_by_key(|s| s.0);
        for w in sites.windows(2) {
            assert!(w[0].1 >= w[1].1 * (1.0 - 1e-9), "graph {i}: {sites:?}");
        }
    }
}

#[test]
fn prediction_grows_with_memory_and_cores() {
    for (i, m) in models(8, 200, true).iter().enumerate() {
        let mut last = 0.0;
        for memory in [0, GB, 10 * GB, 100 * GB, 1000 * GB, u64::MAX] {
            let x = optimizer::plan(m, &budget(16.0, memory))
                .unwrap()
                .predicted();
            assert!(
                x >= last * (1.0 - 1e-9),
                "graph {i} memory {memory}: {x} < {last}"
            );
            last = x;
        }
        let mut last = 0.0;
        for cores in [1.0, 2.0, 8.0, 16.0, 64.0] {
            let x = optimizer::plan(m, &budget(cores, 0)).unwrap().predicted();
            assert!(x >= last * (1.0 - 1e-9), "graph {i} cores {cores}");
            last = x;
        }
    }
}

#[test]
fn cache_site_is_legal_and_plans_apply() {
    for (i, m) in models(9, 200, false).iter().enumerate() {
        let closure = randomness_closure(&m.spec);
        let plan = optimizer::plan(m, &budget(16.0, u64::MAX)).unwrap();
        if let Some(site) = &plan.cache_site {
            assert!(!closure.contains(site), "graph {i}: cache at {site}");
        }
        let rewritten = pipetune::rewriter::apply_plan(&m.spec, &plan).unwrap();
        rewritten.validated().unwrap();
    }
}

#[test]
fn live_resnet_plan_parallelizes_decode_and_caches_records() {
    let _t = timing_lock();
    let stores = StoreRegistry::with_builtins();
    let spec = naive_configuration(&presets::resnet_shape()).unwrap();
    let opts = LiveOptions {
        trace: StableOptions {
            threshold: 0.05,
            min_seconds: 2.0,
            max_seconds: 5.0,
            interval_seconds: 1.0,
        },
        engine: EngineOptions {
            cpu_model: CpuModel::Virtual { cores: 16 },
            ..EngineOptions::default()
        },
        ..LiveOptions::default()
    };
    let (model, _) = optimizer::trace_model(&spec, &stores, &opts).unwrap();
    let plan = optimizer::plan(&model, &budget(16.0, 300 * GB)).unwrap();
    assert_eq!(plan.cache_site.as_deref(), Some("interleave"));
    assert!(
        (14..=16).contains(&plan.integer_parallelism["decode"]),
        "{plan:?}"
    );
    assert_eq!(plan.integer_parallelism["crop"], 2);
    assert_eq!(plan.binding_constraint, BindingConstraint::Cpu);
    let x = plan.predicted();
    assert!((32.0..38.0).contains(&x), "{x}");

    let small = optimizer::plan(&model, &budget(16.0, 100 * GB)).unwrap();
    assert_eq!(small.cache_site, None);
}
