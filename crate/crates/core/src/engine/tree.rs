use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{BoxIter, Cancel, Element, EngineCtx, EngineOptions, OpKind, Operator, PipelineSpec};
use crate::error::{Error, Result};
use crate::storage::StoreRegistry;
use crate::tracer::{TraceSnapshot, Tracer};

/// A running pipeline: the root iterator plus the shared runtime state.
pub struct IteratorTree {
    ctx: Arc<EngineCtx>,
    root: Option<BoxIter>,
    scope: Arc<Cancel>,
    closed: bool,
}

/// Instantiates `spec`, binding sources to `stores`. Counters go to `tracer`
/// when one is supplied; it must have been created for the same spec.
pub fn instantiate(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    tracer: Option<Arc<Tracer>>,
    options: EngineOptions,
) -> Result<IteratorTree> {
    spec.validated()?;
    for n in &spec.nodes {
        if let Operator::Source(p) = &n.op {
            stores.get(&p.store_id)?;
        }
    }
    super::cpu::tighten_timer_slack();
    let ctx = Arc::new(EngineCtx::new(
        spec.clone(),
        stores.clone(),
        tracer,
        options,
    ));
    let scope = Cancel::root();
    let root = ctx.build(&spec.root, &scope)?;
    Ok(IteratorTree {
        ctx,
        root: Some(root),
        scope,
        closed: false,
    })
}

impl IteratorTree {
    /// Pulls the next root element; `Ok(None)` is end of stream.
    pub fn next(&mut self) -> Result<Option<Element>> {
        if self.closed {
            return Err(Error::Closed);
        }
        match self.root.as_mut() {
            Some(r) => r.next(),
            None => Ok(None),
        }
    }

    /// Stops every worker and releases all operators. Idempotent.
    pub fn close(&mut self) {
        if self.closed {
            return;
        }
        self.closed = true;
        self.scope.cancel();
        if let Some(mut r) = self.root.take() {
            r.close();
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn spec(&self) -> &PipelineSpec {
        &self.ctx.spec
    }

    pub fn tracer(&self) -> Option<&Arc<Tracer>> {
        self.ctx.tracer.as_ref()
    }

    /// Worker threads currently alive for this tree.
    pub fn live_workers(&self) -> usize {
        self.ctx.live_workers()
    }

    /// True when every Cache in the tree has finished filling.
    pub fn caches_warm(&self) -> bool {
        self.ctx.caches_warm()
    }

    pub fn has_cache(&self) -> bool {
        self.ctx
            .spec
            .nodes
            .iter()
            .any(|n| n.kind() == OpKind::Cache)
    }

    /// Pulls elements until the budget is spent or the stream ends, and
    /// reports the rate seen after the warmup portion.
    pub fn run_benchmark(&mut self, config: &BenchConfig) -> Result<ThroughputReport> {
        let start = Instant::now();
        let mut stamps = Vec::new();
        loop {
            let done = match config.budget {
                BenchBudget::Seconds(s) => start.elapsed().as_secs_f64() >= s,
                BenchBudget::Elements(n) => stamps.len() as u64 >= n,
            };
            if done || self.next()?.is_none() {
                break;
            }
            stamps.push(start.elapsed().as_secs_f64());
        }
        let wall = start.elapsed().as_secs_f64();
        let f = config.warmup_fraction.clamp(0.0, 1.0);
        let post: &[f64] = match config.budget {
            BenchBudget::Seconds(s) => {
                let cutoff = f * s.min(wall);
                let first = stamps.partition_point(|&t| t < cutoff);
                &stamps[first..]
            }
            BenchBudget::Elements(_) => {
                let skip = (f * stamps.len() as f64).ceil() as usize;
                &stamps[skip.min(stamps.len())..]
            }
        };
        let rate = match post {
            [first, .., last] if last > first => (post.len() - 1) as f64 / (last - first),
            _ if wall > 0.0 => stamps.len() as f64 / wall,
            _ => 0.0,
        };
        Ok(ThroughputReport {
            minibatches_per_sec: rate,
            elements_consumed: stamps.len() as u64,
            wall_seconds: wall,
        })
    }

    /// Drives the tree while watching the root throughput estimate, and
    /// returns once successive estimates differ by at most `threshold`
    /// (relative), at least `min_seconds` have passed and every cache is
    /// warm, or after `max_seconds`.
    pub fn trace_until_stable(&mut self, opts: &StableOptions) -> Result<StableTrace> {
        let tracer = self.tracer().cloned().ok_or_else(|| {
            Error::InvalidArgument("tree was instantiated without a tracer".into())
        })?;
        let start = Instant::now();
        let origin = tracer.snapshot(true)?;
        let mut base = origin.clone();
        let mut estimates: Vec<f64> = Vec::new();
        let mut next_check = opts.interval_seconds;
        loop {
            let ended = self.next()?.is_none();
            let elapsed = start.elapsed().as_secs_f64();
            if elapsed < next_check && !ended {
                continue;
            }
            next_check += opts.interval_seconds;
            let snap = tracer.snapshot(true)?;
            let window = snap.delta(&base);
            let estimate = window.root_rate();
            let delta = match estimates.last() {
                Some(&prev) if prev > 0.0 => (estimate - prev).abs() / prev,
                _ => 1.0,
            };
            estimates.push(estimate);
            let stable =
                delta <= opts.threshold && elapsed >= opts.min_seconds && self.caches_warm();
            if stable || ended || elapsed >= opts.max_seconds {
                return Ok(StableTrace {
                    snapshot: window,
                    stable,
                    estimates,
                    elapsed_seconds: elapsed,
                });
            }
            if estimates.len() == 1 {
                base = snap;
            }
        }
    }
}

impl Drop for IteratorTree {
    fn drop(&mut self) {
        self.close();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchBudget {
    Seconds(f64),
    Elements(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub budget: BenchBudget,
    pub warmup_fraction: f64,
}

impl BenchConfig {
    pub fn seconds(s: f64, warmup_fraction: f64) -> Self {
        BenchConfig {
            budget: BenchBudget::Seconds(s),
            warmup_fraction,
        }
    }

    pub fn elements(n: u64, warmup_fraction: f64) -> Self {
        BenchConfig {
            budget: BenchBudget::Elements(n),
            warmup_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub minibatches_per_sec: f64,
    pub elements_consumed: u64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableOptions {
    pub threshold: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub interval_seconds: f64,
}

impl Default for StableOptions {
    fn default() -> Self {
        StableOptions {
            threshold: 0.01,
            min_seconds: 0.0,
            max_seconds: 30.0,
            interval_seconds: 1.0,
        }
    }
}

/// Result of [`IteratorTree::trace_until_stable`].
#[derive(Debug, Clone, PartialEq)]
pub struct StableTrace {
    /// Counters over the measurement window, which excludes the first
    /// interval whenever more than one interval was observed.
    pub snapshot: TraceSnapshot,
    pub stable: bool,
    /// Root throughput estimate after each interval.
    pub estimates: Vec<f64>,
    pub elapsed_seconds: f64,
}
