//! Turns a [`RateModel`] and a resource budget into a [`TuningPlan`]: core
//! allocation by linear programming, a disk bound, cache placement and
//! prefetch buffer sizing.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::spec::{OpKind, PipelineSpec};
use crate::engine::{instantiate, EngineOptions, StableOptions, StableTrace};
use crate::error::{Error, Result};
use crate::rates::{Estimate, RateEstimate, RateModel};
use crate::rewriter;
use crate::storage::{BandwidthCurve, StoreRegistry};
use crate::tracer::Tracer;

/// Largest prefetch buffer the planner will request.
pub const MAX_PREFETCH: u32 = 64;
/// Smallest buffer placed on the root edge.
pub const MIN_ROOT_PREFETCH: u32 = 2;

/// Disk capacity available to the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiskBudget {
    #[default]
    Unlimited,
    /// Bytes per second regardless of read parallelism.
    Bandwidth(f64),
    Curve(BandwidthCurve),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceBudget {
    /// Cores available; fractional values are allowed.
    pub cores: f64,
    pub memory_bytes: u64,
    #[serde(default)]
    pub disk: DiskBudget,
}

impl ResourceBudget {
    pub fn new(cores: f64, memory_bytes: u64, disk: DiskBudget) -> Result<Self> {
        if !(cores > 0.0 && cores.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cores must be positive, got {cores}"
            )));
        }
        Ok(ResourceBudget {
            cores,
            memory_bytes,
            disk,
        })
    }
}

/// What limits the predicted throughput.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BindingConstraint {
    Cpu,
    Disk,
    /// A sequential operator saturates its single core.
    Sequential(String),
    /// Nothing in the model has a finite bound.
    ModelNone,
}

/// One operator's row in the core-allocation program.
#[derive(Debug, Clone, PartialEq)]
pub struct LpTerm {
    pub name: String,
    /// Root minibatches per core-second.
    pub rate: f64,
    /// Capped at one core.
    pub sequential: bool,
    /// Cores consumed per allocated unit, e.g. a UDF's internal threads.
    pub weight: f64,
}

impl LpTerm {
    pub fn new(name: impl Into<String>, rate: f64, sequential: bool) -> Self {
        LpTerm {
            name: name.into(),
            rate,
            sequential,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub theta: BTreeMap<String, f64>,
    pub throughput: f64,
    pub binding: BindingConstraint,
}

/// Maximizes `X` subject to `theta_i * R_i >= X`, `sum w_i * theta_i <= K`
/// and `theta_i <= 1` for sequential operators.
///
/// Every operator must keep up with `X`, so `theta_i = X / R_i` and the core
/// constraint gives `X <= K / sum(w_i / R_i)`; each sequential operator adds
/// `X <= R_i`. Any cores beyond the binding bound stay unallocated.
pub fn solve_cpu_lp(terms: &[LpTerm], cores: f64) -> Result<LpSolution> {
    if terms.is_empty() {
        return Err(Error::InvalidArgument(
            "no operators to allocate cores to".into(),
        ));
    }
    if !(cores > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cores must be positive, got {cores}"
        )));
    }
    for t in terms {
        if !(t.rate > 0.0 && t.rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rate of `{}` must be finite and positive, got {}",
                t.name, t.rate
            )));
        }
        if !(t.weight > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight of `{}` must be positive",
                t.name
            )));
        }
    }
    let cpu_x = cores / terms.iter().map(|t| t.weight / t.rate).sum::<f64>();
    let slowest_sequential = terms
        .iter()
        .filter(|t| t.sequential)
        .min_by(|a, b| a.rate.total_cmp(&b.rate).then_with(|| a.name.cmp(&b.name)));
    let (throughput, binding) = match slowest_sequential {
        Some(t) if t.rate < cpu_x => (t.rate, BindingConstraint::Sequential(t.name.clone())),
        _ => (cpu_x, BindingConstraint::Cpu),
    };
    let theta = terms
        .iter()
        .map(|t| (t.name.clone(), throughput / t.rate))
        .collect();
    Ok(LpSolution {
        theta,
        throughput,
        binding,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiskBound {
    pub throughput: RateEstimate,
    /// Read parallelism needed to reach the curve's knee.
    pub min_parallelism: u32,
}

/// Throughput the disk can sustain at `io_bytes_per_minibatch`.
pub fn disk_bound(io_bytes_per_minibatch: f64, disk: &DiskBudget) -> DiskBound {
    let (bandwidth, knee) = match disk {
        DiskBudget::Unlimited => (None, 1),
        DiskBudget::Bandwidth(b) => (Some(*b), 1),
        DiskBudget::Curve(c) => (Some(c.max_bandwidth()), c.knee.max(1)),
    };
    let throughput = match bandwidth {
        Some(b) if io_bytes_per_minibatch > 0.0 => RateEstimate::Finite(b / io_bytes_per_minibatch),
        _ => RateEstimate::Infinite,
    };
    DiskBound {
        throughput,
        min_parallelism: knee,
    }
}

/// Operators a new Cache may follow: cacheable ones that are not Prefetch or
/// Cache operators, do not already feed a Cache and are not under one.
pub fn place_cache_candidates(model: &RateModel) -> BTreeSet<String> {
    let spec = &model.spec;
    let parents = spec.parents();
    model
        .ops
        .iter()
        .filter(|(name, m)| {
            m.materialization.cacheable
                && !m.materialization.below_cache
                && !matches!(m.kind, OpKind::Prefetch | OpKind::Cache)
                && parents
                    .get(name.as_str())
                    .and_then(|p| spec.node(p))
                    .is_none_or(|p| p.kind() != OpKind::Cache)
        })
        .map(|(name, _)| name.clone())
        .collect()
}

/// The candidate nearest the root whose full output fits in
/// `memory_bytes`.
pub fn place_cache(model: &RateModel, memory_bytes: u64) -> Option<String> {
    let depths = model.spec.depths();
    place_cache_candidates(model)
        .into_iter()
        .filter(|name| {
            matches!(model.ops[name].materialization.materialized_bytes,
                Estimate::Known(b) if b <= memory_bytes as f64)
        })
        .filter_map(|name| depths.get(&name).map(|d| (*d, name)))
        .min()
        .map(|(_, name)| name)
}

/// Buffer size for a prefetch after an operator that was idle for
/// `idle_ratio` of its window and will run with `parallelism` workers.
pub fn prefetch_buffer(idle_ratio: f64, parallelism: u32) -> u32 {
    let b = (idle_ratio.clamp(0.0, 1.0) * parallelism as f64).round();
    (b as u32).clamp(1, MAX_PREFETCH)
}

/// Fraction of the traced window in which `op`'s workers were not running it.
pub fn idle_ratio(model: &RateModel, op: &str) -> f64 {
    let Some(m) = model.op(op) else { return 1.0 };
    let workers = m.parallelism.unwrap_or(1).max(1) as f64;
    if model.wall_seconds <= 0.0 {
        return 1.0;
    }
    1.0 - (m.cpu_seconds / (model.wall_seconds * workers)).clamp(0.0, 1.0)
}

/// Prefetch placements keyed by the producing operator: one after every
/// knob-bearing operator that still runs in steady state, and one on the
/// root edge. Edges that already feed a Prefetch are left alone.
pub fn inject_prefetch(
    model: &RateModel,
    integer_parallelism: &BTreeMap<String, u32>,
    skip: &BTreeSet<String>,
) -> BTreeMap<String, u32> {
    let spec = &model.spec;
    let parents = spec.parents();
    let buffered = |name: &str| {
        parents
            .get(name)
            .and_then(|p| spec.node(p))
            .is_some_and(|p| p.kind() == OpKind::Prefetch)
    };
    let mut out = BTreeMap::new();
    for (name, m) in &model.ops {
        if m.parallelism.is_none() || skip.contains(name) || buffered(name) {
            continue;
        }
        let par = integer_parallelism
            .get(name)
            .copied()
            .or(m.parallelism)
            .unwrap_or(1);
        out.insert(name.clone(), prefetch_buffer(idle_ratio(model, name), par));
    }
    let root = &spec.root;
    let root_is_prefetch = spec
        .root_node()
        .is_some_and(|n| n.kind() == OpKind::Prefetch);
    if !root_is_prefetch {
        let par = integer_parallelism.get(root).copied().unwrap_or(1);
        let b = prefetch_buffer(idle_ratio(model, root), par).max(MIN_ROOT_PREFETCH);
        let entry = out.entry(root.clone()).or_insert(b);
        *entry = (*entry).max(MIN_ROOT_PREFETCH);
    }
    out
}

/// A complete set of edits plus the throughput they are expected to reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningPlan {
    /// Fractional cores per operator.
    pub theta: BTreeMap<String, f64>,
    /// Knob values for knob-bearing operators.
    pub integer_parallelism: BTreeMap<String, u32>,
    /// Operator whose output gets cached, if any.
    pub cache_site: Option<String>,
    /// Prefetch buffer per producing operator.
    pub prefetch: BTreeMap<String, u32>,
    #[serde(rename = "predicted_X")]
    pub predicted_x: RateEstimate,
    pub cpu_bound: RateEstimate,
    pub disk_bound: RateEstimate,
    pub binding_constraint: BindingConstraint,
    pub io_bytes_per_minibatch: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TuningPlan {
    /// A plan that changes nothing.
    pub fn empty() -> Self {
        TuningPlan {
            theta: BTreeMap::new(),
            integer_parallelism: BTreeMap::new(),
            cache_site: None,
            prefetch: BTreeMap::new(),
            predicted_x: RateEstimate::Infinite,
            cpu_bound: RateEstimate::Infinite,
            disk_bound: RateEstimate::Infinite,
            binding_constraint: BindingConstraint::ModelNone,
            io_bytes_per_minibatch: 0.0,
            warnings: Vec::new(),
        }
    }

    /// Predicted throughput with an unbounded prediction mapped to infinity.
    pub fn predicted(&self) -> f64 {
        as_f64(self.predicted_x)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            context: "tuning plan".into(),
            message: e.to_string(),
        })
    }
}

fn as_f64(r: RateEstimate) -> f64 {
    match r {
        RateEstimate::Finite(v) => v,
        RateEstimate::Infinite => f64::INFINITY,
        RateEstimate::Unknown => f64::NAN,
    }
}

/// `min(min_i theta_i * R_i, X_disk)` over operators with finite rates.
pub fn predict_throughput(
    theta: &BTreeMap<String, f64>,
    model: &RateModel,
    disk: RateEstimate,
) -> RateEstimate {
    let mut x = as_f64(disk);
    for (name, t) in theta {
        if let Some(RateEstimate::Finite(r)) = model.op(name).map(|m| m.rate) {
            x = x.min(t * r);
        }
    }
    if x.is_finite() {
        RateEstimate::Finite(x)
    } else {
        RateEstimate::Infinite
    }
}

/// Operators with no steady-state cost once `site` is cached: the site, its
/// subtree and everything under an existing Cache.
fn steady_state_free(model: &RateModel, site: Option<&str>) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = model
        .ops
        .iter()
        .filter(|(_, m)| m.materialization.below_cache)
        .map(|(n, _)| n.clone())
        .collect();
    if let Some(s) = site {
        out.insert(s.to_string());
        out.extend(model.spec.descendants(s));
    }
    out
}

/// Plans with cache placement chosen by [`place_cache`].
pub fn plan(model: &RateModel, budget: &ResourceBudget) -> Result<TuningPlan> {
    let site = place_cache(model, budget.memory_bytes);
    plan_with_cache(model, budget, site.as_deref())
}

/// Plans with the cache at `site` (or no new cache): removes the costs the
/// cache makes free, solves the core allocation, applies the disk bound and
/// sizes prefetch buffers.
pub fn plan_with_cache(
    model: &RateModel,
    budget: &ResourceBudget,
    site: Option<&str>,
) -> Result<TuningPlan> {
    if let Some(s) = site {
        let m = model
            .op(s)
            .ok_or_else(|| Error::UnknownNode(s.to_string()))?;
        if !m.materialization.cacheable {
            return Err(Error::RandomCache(s.to_string()));
        }
    }
    let free = steady_state_free(model, site);
    let mut warnings = model.warnings.clone();
    let mut terms = Vec::new();
    for (name, m) in &model.ops {
        if free.contains(name) {
            continue;
        }
        match m.rate {
            RateEstimate::Finite(r) if r > 0.0 => terms.push(LpTerm {
                name: name.clone(),
                rate: r,
                sequential: m.is_sequential(),
                weight: m.udf_parallelism.max(1) as f64,
            }),
            RateEstimate::Unknown => warnings.push(format!(
                "`{name}` left out of the core allocation: rate unknown"
            )),
            _ => {}
        }
    }
    let root_completions = model.op(&model.root).map_or(0, |m| m.completions);
    let io_bytes: u64 = model
        .ops
        .iter()
        .filter(|(name, m)| m.kind == OpKind::Source && !free.contains(*name))
        .map(|(_, m)| m.bytes_read)
        .sum();
    let io = if root_completions == 0 {
        0.0
    } else {
        io_bytes as f64 / root_completions as f64
    };
    let disk = disk_bound(io, &budget.disk);
    let x_disk = as_f64(disk.throughput);

    let lp = if terms.is_empty() {
        None
    } else {
        Some(solve_cpu_lp(&terms, budget.cores)?)
    };
    let x_cpu = lp.as_ref().map_or(f64::INFINITY, |s| s.throughput);
    let (x, binding) = match &lp {
        _ if x_disk < x_cpu => (x_disk, BindingConstraint::Disk),
        Some(s) => (s.throughput, s.binding.clone()),
        None => (f64::INFINITY, BindingConstraint::ModelNone),
    };
    let theta: BTreeMap<String, f64> = if x.is_finite() {
        terms.iter().map(|t| (t.name.clone(), x / t.rate)).collect()
    } else {
        BTreeMap::new()
    };

    let readers = readers_of_sources(&model.spec);
    let mut integer_parallelism = BTreeMap::new();
    for (name, m) in &model.ops {
        if m.parallelism.is_none() || free.contains(name) {
            continue;
        }
        let t = theta.get(name).copied().unwrap_or(0.0);
        let mut k = ((t - 1e-9).ceil().max(1.0)) as u32;
        if readers.contains(name) {
            k = k.max(disk.min_parallelism);
        }
        integer_parallelism.insert(name.clone(), k);
    }
    let prefetch = inject_prefetch(model, &integer_parallelism, &free);
    let to_rate = |v: f64| {
        if v.is_finite() {
            RateEstimate::Finite(v)
        } else {
            RateEstimate::Infinite
        }
    };
    Ok(TuningPlan {
        theta,
        integer_parallelism,
        cache_site: site.map(str::to_string),
        prefetch,
        predicted_x: to_rate(x),
        cpu_bound: to_rate(x_cpu),
        disk_bound: disk.throughput,
        binding_constraint: binding,
        io_bytes_per_minibatch: io,
        warnings,
    })
}

/// Knob-bearing operators that read directly from a source.
fn readers_of_sources(spec: &PipelineSpec) -> BTreeSet<String> {
    spec.nodes
        .iter()
        .filter(|n| n.is_tunable())
        .filter(|n| {
            n.children
                .iter()
                .any(|c| spec.node(c).is_some_and(|c| c.kind() == OpKind::Source))
        })
        .map(|n| n.name.clone())
        .collect()
}

/// Settings for tracing a live pipeline during optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiveOptions {
    pub trace: StableOptions,
    pub engine: EngineOptions,
    /// Elements a Cache keeps before replaying, so traces see its warm state.
    pub cache_probe: usize,
    /// Trace, plan and rewrite iterations.
    pub passes: usize,
}

impl Default for LiveOptions {
    fn default() -> Self {
        LiveOptions {
            trace: StableOptions {
                threshold: 0.05,
                min_seconds: 3.0,
                max_seconds: 10.0,
                interval_seconds: 1.0,
            },
            engine: EngineOptions::default(),
            cache_probe: 512,
            passes: 2,
        }
    }
}

/// Traces `spec` until its throughput settles and analyzes the window.
pub fn trace_model(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    opts: &LiveOptions,
) -> Result<(RateModel, StableTrace)> {
    let tracer = Tracer::new(spec);
    let mut engine = opts.engine;
    if spec.nodes.iter().any(|n| n.kind() == OpKind::Cache) {
        engine.cache_probe = Some(opts.cache_probe);
    }
    let mut tree = instantiate(spec, stores, Some(Arc::clone(&tracer)), engine)?;
    let trace = tree.trace_until_stable(&opts.trace)?;
    tree.close();
    let model = RateModel::from_snapshot(&trace.snapshot, Some(stores))?;
    Ok((model, trace))
}

/// Result of [`optimize_live`].
#[derive(Debug, Clone)]
pub struct LiveOutcome {
    pub spec: PipelineSpec,
    /// The plan of every pass, in order.
    pub plans: Vec<TuningPlan>,
    /// The model each plan was computed from.
    pub models: Vec<RateModel>,
}

impl LiveOutcome {
    pub fn final_plan(&self) -> &TuningPlan {
        self.plans.last().expect("at least one pass")
    }
}

/// Repeatedly traces the current spec, plans against `budget` and applies
/// the plan, so later passes see the effect of earlier rewrites.
pub fn optimize_live(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    budget: &ResourceBudget,
    opts: &LiveOptions,
) -> Result<LiveOutcome> {
    let mut current = spec.clone();
    let mut plans = Vec::new();
    let mut models = Vec::new();
    for _ in 0..opts.passes.max(1) {
        let (model, _) = trace_model(&current, stores, opts)?;
        let p = plan(&model, budget)?;
        current = rewriter::apply_plan(&current, &p)?;
        plans.push(p);
        models.push(model);
    }
    Ok(LiveOutcome {
        spec: current,
        plans,
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_and_parse_allocation() {
        let terms = [
            LpTerm::new("decode", 2.5, false),
            LpTerm::new("parse", 50.0, true),
        ];
        let s = solve_cpu_lp(&terms, 16.0).unwrap();
        let expect = 16.0 / (0.4 + 0.02);
        assert!((s.throughput - expect).abs() < 1e-9);
        assert!((s.theta["decode"] - 15.238).abs() < 1e-3);
        assert!((s.theta["parse"] - 0.762).abs() < 1e-3);
        assert_eq!(s.binding, BindingConstraint::Cpu);
    }

    #[test]
    fn trivial_allocations() {
        let s = solve_cpu_lp(&[LpTerm::new("m", 1.0, false)], 4.0).unwrap();
        assert_eq!(s.throughput, 4.0);
        assert_eq!(s.theta["m"], 4.0);
        let s = solve_cpu_lp(&[LpTerm::new("seq", 3.0, true)], 1e6).unwrap();
        assert_eq!(s.throughput, 3.0);
        assert_eq!(s.binding, BindingConstraint::Sequential("seq".into()));
        assert!(solve_cpu_lp(&[], 4.0).is_err());
        assert!(solve_cpu_lp(&[LpTerm::new("m", 0.0, false)], 4.0).is_err());
    }

    #[test]
    fn udf_threads_consume_cores() {
        let mut t = LpTerm::new("augment", 1.0, false);
        t.weight = 3.0;
        let s = solve_cpu_lp(&[t], 12.0).unwrap();
        assert!((s.throughput - 4.0).abs() < 1e-12);
    }

    #[test]
    fn disk_examples() {
        let io = 128.0 * 112_640.0;
        let d = disk_bound(io, &DiskBudget::Bandwidth(100e6));
        assert!((d.throughput.finite().unwrap() - 6.94).abs() < 0.01);
        assert_eq!(
            disk_bound(0.0, &DiskBudget::Bandwidth(100e6)).throughput,
            RateEstimate::Infinite
        );
        let d = disk_bound(io, &DiskBudget::Bandwidth(2e9));
        assert!((d.throughput.finite().unwrap() - 138.7).abs() < 0.1);
        let curve =
            BandwidthCurve::from_samples(vec![(1, 1e8), (2, 2e8), (4, 4e8), (8, 4e8)]).unwrap();
        assert_eq!(disk_bound(io, &DiskBudget::Curve(curve)).min_parallelism, 4);
    }

    #[test]
    fn prefetch_buffers() {
        assert_eq!(prefetch_buffer(0.5, 8), 4);
        assert_eq!(prefetch_buffer(0.0, 8), 1);
        assert_eq!(prefetch_buffer(1.0, 500), MAX_PREFETCH);
    }

    #[test]
    fn plan_json_round_trip() {
        let mut p = TuningPlan::empty();
        p.cache_site = Some("interleave".into());
        p.binding_constraint = BindingConstraint::Sequential("parse".into());
        p.predicted_x = RateEstimate::Finite(38.1);
        let back = TuningPlan::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert!(p.to_json().contains("\"predicted_X\""));
    }
}
