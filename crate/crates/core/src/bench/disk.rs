//! Bandwidth sweeps and cache-size estimation experiments.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::tune::measure;
use crate::engine::spec::{Operator, PipelineSpec};
use crate::engine::{instantiate, EngineOptions};
use crate::error::Result;
use crate::optimizer::{self, BindingConstraint, DiskBudget, ResourceBudget};
use crate::rates::{Estimate, RateEstimate, RateModel};
use crate::storage::{self, StoreRegistry};
use crate::tracer::Tracer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    pub cores: f64,
    pub warmup_seconds: f64,
    pub trace_seconds: f64,
    pub engine: EngineOptions,
}

/// One bandwidth level of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Bytes per second, `None` for an unthrottled store.
    pub bandwidth: Option<f64>,
    pub predicted: f64,
    pub disk_bound: RateEstimate,
    pub binding: BindingConstraint,
    pub measured: f64,
}

impl SweepPoint {
    pub fn relative_error(&self) -> f64 {
        (self.predicted - self.measured).abs() / self.measured
    }
}

/// Runs `spec` at every bandwidth level and compares the measured rate with
/// the planner's prediction for the same trace.
pub fn disk_sweep(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    levels: &[Option<u64>],
    cfg: &SweepConfig,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for &level in levels {
        let mut limited = stores.clone();
        limited.set_bandwidth(level);
        for id in limited.ids() {
            if let Some(b) = limited.get(id)?.bucket() {
                b.drain();
            }
        }
        let m = measure(
            spec,
            &limited,
            cfg.engine,
            cfg.warmup_seconds,
            cfg.trace_seconds,
        )?;
        let (model, measured) = (m.model, m.rate);
        let disk = match level {
            Some(b) => DiskBudget::Bandwidth(b as f64),
            None => DiskBudget::Unlimited,
        };
        let budget = ResourceBudget::new(cfg.cores, 0, disk)?;
        let plan = optimizer::plan_with_cache(&model, &budget, None)?;
        out.push(SweepPoint {
            bandwidth: level.map(|b| b as f64),
            predicted: plan.predicted(),
            disk_bound: plan.disk_bound,
            binding: plan.binding_constraint,
            measured,
        });
    }
    Ok(out)
}

/// Materialization estimates after tracing for a given time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachePoint {
    pub trace_seconds: f64,
    /// Source elements read during the trace.
    pub source_elements: u64,
    pub estimates: BTreeMap<String, Estimate>,
}

/// Traces `spec` once and records every operator's materialization
/// estimate at each checkpoint (seconds since start).
pub fn cache_estimates(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    checkpoints: &[f64],
    engine: EngineOptions,
) -> Result<Vec<CachePoint>> {
    let tracer = Tracer::new(spec);
    let mut tree = instantiate(spec, stores, Some(Arc::clone(&tracer)), engine)?;
    let sources: Vec<String> = spec
        .nodes
        .iter()
        .filter(|n| matches!(n.op, Operator::Source(_)))
        .map(|n| n.name.clone())
        .collect();
    let start = Instant::now();
    let mut out = Vec::new();
    let mut ended = false;
    for &at in checkpoints {
        while !ended && start.elapsed().as_secs_f64() < at {
            ended = tree.next()?.is_none();
        }
        let snap = tracer.snapshot(true)?;
        if snap.root_completions() == 0 {
            continue;
        }
        let model = RateModel::from_snapshot(&snap, Some(stores))?;
        out.push(CachePoint {
            trace_seconds: start.elapsed().as_secs_f64(),
            source_elements: sources
                .iter()
                .filter_map(|s| snap.op(s))
                .map(|c| c.completions)
                .sum(),
            estimates: model
                .ops
                .iter()
                .map(|(n, m)| (n.clone(), m.materialization.materialized_bytes))
                .collect(),
        });
    }
    tree.close();
    Ok(out)
}

/// Relative errors of the subsampled size estimator over `seeds` draws of
/// `sample` files out of `sizes`.
pub fn subsample_errors(
    sizes: &[u64],
    sample: usize,
    seeds: std::ops::Range<u64>,
) -> Result<Vec<f64>> {
    let truth: f64 = sizes.iter().map(|&s| s as f64).sum();
    seeds
        .map(|seed| {
            let picked: Vec<u64> = storage::sample_files(sizes.len(), sample, seed)
                .into_iter()
                .map(|i| sizes[i])
                .collect();
            let est = storage::estimate_source_size(&picked, sizes.len())?;
            Ok((est - truth).abs() / truth)
        })
        .collect()
}
