//! One-knob-at-a-time tuning loops: the model-guided tuner and a random-walk
//! baseline.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::spec::{OpKind, PipelineSpec};
use crate::engine::{instantiate, CpuModel, EngineOptions};
use crate::error::Result;
use crate::optimizer::{self, ResourceBudget};
use crate::rates::{bottleneck_ranking, RateModel};
use crate::rewriter::{self, Insertion};
use crate::storage::StoreRegistry;
use crate::tracer::Tracer;

/// Settings shared by [`iterative_tune`] and [`random_walk`].
#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub budget: ResourceBudget,
    /// Knob increments to make after the baseline measurement.
    pub steps: usize,
    /// Measured window per step.
    pub trace_seconds: f64,
    /// Time run before each window opens.
    pub warmup_seconds: f64,
    pub engine: EngineOptions,
    /// Stop as soon as a step measures at least this rate.
    pub stop_at: Option<f64>,
}

impl TuneConfig {
    /// Five-second windows on a virtual machine with the budget's cores.
    pub fn new(budget: ResourceBudget, steps: usize) -> Self {
        let cores = budget.cores.ceil().max(1.0) as u32;
        TuneConfig {
            budget,
            steps,
            trace_seconds: 5.0,
            warmup_seconds: 1.0,
            engine: EngineOptions {
                cpu_model: CpuModel::Virtual { cores },
                ..EngineOptions::default()
            },
            stop_at: None,
        }
    }
}

/// One measured configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Operator whose knob was incremented to reach this configuration.
    pub node: Option<String>,
    pub parallelism: BTreeMap<String, u32>,
    /// Root minibatches per second over the window.
    pub measured: f64,
    /// Root elements in the measured window.
    pub elements: u64,
    /// Throughput the core allocation predicts from this step's trace.
    pub predicted: f64,
    pub bottleneck: Option<String>,
    /// Wall-clock seconds since the run began.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneHistory {
    pub variant: String,
    pub seed: Option<u64>,
    pub records: Vec<StepRecord>,
    pub diagnostic: Option<String>,
    pub spec: PipelineSpec,
}

impl TuneHistory {
    /// First step whose measured rate reaches `target`.
    pub fn steps_to(&self, target: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.measured >= target)
            .map(|r| r.step)
    }

    pub fn peak_measured(&self) -> f64 {
        self.records.iter().map(|r| r.measured).fold(0.0, f64::max)
    }

    /// Sum of measured rates over steps, a discrete area under the curve.
    pub fn area(&self) -> f64 {
        self.records.iter().map(|r| r.measured).sum()
    }
}

/// Every knob set to 1 and a prefetch on the root edge.
pub fn naive_configuration(spec: &PipelineSpec) -> Result<PipelineSpec> {
    let mut out = spec.clone();
    for n in out.nodes.iter_mut().filter(|n| n.is_tunable()) {
        n.parallelism = Some(1);
    }
    if out
        .root_node()
        .is_some_and(|n| n.kind() != OpKind::Prefetch)
    {
        let root = out.root.clone();
        out = rewriter::insert_after(&out, &root, Insertion::Prefetch(2))?;
    }
    Ok(out)
}

fn knobs(spec: &PipelineSpec) -> BTreeMap<String, u32> {
    spec.nodes
        .iter()
        .filter_map(|n| n.parallelism.map(|p| (n.name.clone(), p)))
        .collect()
}

/// A traced window and the root rate observed over it.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub model: RateModel,
    pub rate: f64,
    /// Root elements pulled during the window.
    pub elements: u64,
}

/// Runs `spec` for the warmup, then traces one window and analyzes it.
/// The measured rate is `(n - 1) / (t_last - t_first)` over the root
/// elements of the window.
pub fn measure(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    engine: EngineOptions,
    warmup_seconds: f64,
    trace_seconds: f64,
) -> Result<Measurement> {
    let tracer = Tracer::new(spec);
    let mut tree = instantiate(spec, stores, Some(Arc::clone(&tracer)), engine)?;
    let start = Instant::now();
    while start.elapsed().as_secs_f64() < warmup_seconds {
        if tree.next()?.is_none() {
            break;
        }
    }
    let base = tracer.snapshot(true)?;
    let window = Instant::now();
    let mut stamps = Vec::new();
    while window.elapsed().as_secs_f64() < trace_seconds {
        if tree.next()?.is_none() {
            break;
        }
        stamps.push(window.elapsed().as_secs_f64());
    }
    let snapshot = tracer.snapshot(true)?.delta(&base);
    tree.close();
    let model = RateModel::from_snapshot(&snapshot, Some(stores))?;
    let rate = match stamps.as_slice() {
        [first, .., last] if last > first => (stamps.len() - 1) as f64 / (last - first),
        _ => snapshot.root_rate(),
    };
    Ok(Measurement {
        model,
        rate,
        elements: stamps.len() as u64,
    })
}

fn tune(
    variant: &str,
    seed: Option<u64>,
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    cfg: &TuneConfig,
    mut choose: impl FnMut(&RateModel, &[String]) -> Option<String>,
) -> Result<TuneHistory> {
    let mut current = naive_configuration(spec)?;
    let tunable: Vec<String> = knobs(&current).into_keys().collect();
    let mut history = TuneHistory {
        variant: variant.to_string(),
        seed,
        records: Vec::new(),
        diagnostic: None,
        spec: current.clone(),
    };
    if tunable.is_empty() {
        history.diagnostic = Some("pipeline has no tunable operators".into());
        return Ok(history);
    }
    let start = Instant::now();
    let mut node = None;
    for step in 0..=cfg.steps {
        let Measurement {
            model,
            rate: measured,
            elements,
        } = measure(
            &current,
            stores,
            cfg.engine,
            cfg.warmup_seconds,
            cfg.trace_seconds,
        )?;
        let predicted = optimizer::plan_with_cache(&model, &cfg.budget, None)?.predicted();
        let ranking = bottleneck_ranking(&model, &BTreeMap::new());
        history.records.push(StepRecord {
            step,
            node: node.take(),
            parallelism: knobs(&current),
            measured,
            elements,
            predicted,
            bottleneck: ranking.bottleneck().map(str::to_string),
            seconds: start.elapsed().as_secs_f64(),
        });
        if step == cfg.steps || cfg.stop_at.is_some_and(|t| measured >= t) {
            break;
        }
        let Some(pick) = choose(&model, &tunable) else {
            history.diagnostic = Some("no tunable operator has a known rate".into());
            break;
        };
        let k = rewriter::get_parallelism(&current, &pick)?.unwrap_or(1);
        current = rewriter::set_parallelism(&current, &pick, k + 1)?;
        node = Some(pick);
    }
    history.spec = current;
    Ok(history)
}

/// Starting from the naive configuration, repeatedly traces, ranks operators
/// by parallelism-scaled rate and adds one unit of parallelism to the
/// slowest tunable one.
pub fn iterative_tune(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    cfg: &TuneConfig,
) -> Result<TuneHistory> {
    tune("iterative", None, spec, stores, cfg, |model, tunable| {
        bottleneck_ranking(model, &BTreeMap::new())
            .order
            .into_iter()
            .map(|(name, _)| name)
            .find(|name| tunable.contains(name))
    })
}

/// Like [`iterative_tune`] but picks the operator uniformly at random.
pub fn random_walk(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<TuneHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tune(
        "random_walk",
        Some(seed),
        spec,
        stores,
        cfg,
        |_, tunable| Some(tunable[rng.random_range(0..tunable.len())].clone()),
    )
}
