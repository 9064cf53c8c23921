//! Operational-analysis model of a traced pipeline.
//!
//! Counters from a [`TraceSnapshot`] become per-operator visit ratios
//! (completions per root completion), resource-accounted rates (root
//! minibatches per core-second) and materialization estimates (element count
//! times bytes per element).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::engine::spec::{OpKind, Operator, PipelineSpec, RepeatCount};
use crate::error::{Error, Result};
use crate::storage::{self, StoreRegistry};
use crate::tracer::TraceSnapshot;

/// A quantity that may be unbounded or impossible to estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    Known(f64),
    Unbounded,
    Unknown,
}

/// A per-core rate. Operators that used no CPU never limit throughput and
/// are `Infinite`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RateEstimate {
    Finite(f64),
    Infinite,
    Unknown,
}

impl Estimate {
    pub fn known(self) -> Option<f64> {
        match self {
            Estimate::Known(v) => Some(v),
            _ => None,
        }
    }

    fn map(self, f: impl FnOnce(f64) -> f64) -> Estimate {
        match self {
            Estimate::Known(v) => Estimate::Known(f(v)),
            other => other,
        }
    }
}

impl RateEstimate {
    pub fn finite(self) -> Option<f64> {
        match self {
            RateEstimate::Finite(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NumOrTag {
    Num(f64),
    Tag(String),
}

impl Serialize for Estimate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Estimate::Known(v) => s.serialize_f64(*v),
            Estimate::Unbounded => s.serialize_str("UNBOUNDED"),
            Estimate::Unknown => s.serialize_str("UNKNOWN"),
        }
    }
}

impl<'de> Deserialize<'de> for Estimate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match NumOrTag::deserialize(d)? {
            NumOrTag::Num(v) => Ok(Estimate::Known(v)),
            NumOrTag::Tag(t) if t == "UNBOUNDED" => Ok(Estimate::Unbounded),
            NumOrTag::Tag(t) if t == "UNKNOWN" => Ok(Estimate::Unknown),
            NumOrTag::Tag(t) => Err(serde::de::Error::custom(format!(
                "unexpected estimate {t:?}"
            ))),
        }
    }
}

impl Serialize for RateEstimate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RateEstimate::Finite(v) => s.serialize_f64(*v),
            RateEstimate::Infinite => s.serialize_str("INFINITE"),
            RateEstimate::Unknown => s.serialize_str("UNKNOWN"),
        }
    }
}

impl<'de> Deserialize<'de> for RateEstimate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match NumOrTag::deserialize(d)? {
            NumOrTag::Num(v) => Ok(RateEstimate::Finite(v)),
            NumOrTag::Tag(t) if t == "INFINITE" => Ok(RateEstimate::Infinite),
            NumOrTag::Tag(t) if t == "UNKNOWN" => Ok(RateEstimate::Unknown),
            NumOrTag::Tag(t) => Err(serde::de::Error::custom(format!("unexpected rate {t:?}"))),
        }
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimate::Known(v) => write!(f, "{}", human(*v)),
            Estimate::Unbounded => f.write_str("UNBOUNDED"),
            Estimate::Unknown => f.write_str("UNKNOWN"),
        }
    }
}

impl fmt::Display for RateEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateEstimate::Finite(v) => write!(f, "{v:.4}"),
            RateEstimate::Infinite => f.write_str("INFINITE"),
            RateEstimate::Unknown => f.write_str("UNKNOWN"),
        }
    }
}

fn human(v: f64) -> String {
    let a = v.abs();
    if a >= 1e9 {
        format!("{:.3}G", v / 1e9)
    } else if a >= 1e6 {
        format!("{:.3}M", v / 1e6)
    } else if a >= 1e3 {
        format!("{:.3}k", v / 1e3)
    } else {
        format!("{v:.3}")
    }
}

/// Completions at each operator per root completion. Operators with no
/// completions are `Unknown` rather than zero.
///
/// Along a path, `(C_i / C_parent) * (C_parent / C_0)` telescopes to
/// `C_i / C_0`; an Interleave's local ratio divides by the summed
/// completions of all its children, which leaves the same telescoped value.
pub fn visit_ratios(snapshot: &TraceSnapshot) -> Result<BTreeMap<String, Estimate>> {
    let c0 = snapshot.root_completions();
    if c0 == 0 {
        return Err(Error::EmptyTrace);
    }
    Ok(snapshot
        .ops
        .iter()
        .map(|(name, c)| {
            let v = if c.completions == 0 {
                Estimate::Unknown
            } else {
                Estimate::Known(c.completions as f64 / c0 as f64)
            };
            (name.clone(), v)
        })
        .collect())
}

/// Root minibatches per core-second at each operator:
/// `R_i = (C_i / cpu_seconds_i) / V_i`.
pub fn cpu_rates(
    snapshot: &TraceSnapshot,
    visits: &BTreeMap<String, Estimate>,
) -> BTreeMap<String, RateEstimate> {
    snapshot
        .ops
        .iter()
        .map(|(name, c)| {
            let rate = match visits.get(name) {
                Some(Estimate::Known(v)) if c.cpu_ns == 0 => {
                    let _ = v;
                    RateEstimate::Infinite
                }
                Some(Estimate::Known(v)) => {
                    let cpu_s = c.cpu_ns as f64 * 1e-9;
                    RateEstimate::Finite(c.completions as f64 / cpu_s / v)
                }
                _ if c.cpu_ns == 0 => RateEstimate::Infinite,
                _ => RateEstimate::Unknown,
            };
            (name.clone(), rate)
        })
        .collect()
}

/// Filesystem bytes read per root minibatch.
pub fn io_cost(snapshot: &TraceSnapshot) -> Result<f64> {
    let c0 = snapshot.root_completions();
    if c0 == 0 {
        return Err(Error::EmptyTrace);
    }
    let bytes: u64 = snapshot
        .spec
        .nodes
        .iter()
        .filter(|n| n.kind() == OpKind::Source)
        .filter_map(|n| snapshot.op(&n.name))
        .map(|c| c.bytes_read)
        .sum();
    Ok(bytes as f64 / c0 as f64)
}

/// Operators whose output depends on a random seed: every randomized Map
/// and every operator above one. None of them may be cached.
pub fn randomness_closure(spec: &PipelineSpec) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for n in spec.nodes.iter().filter(|n| n.op.is_random()) {
        out.insert(n.name.clone());
        out.extend(spec.ancestors(&n.name));
    }
    out
}

/// Total bytes of every store a source reads, taken from store metadata.
pub fn store_sizes_from_registry(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
) -> BTreeMap<String, f64> {
    spec.nodes
        .iter()
        .filter_map(|n| match &n.op {
            Operator::Source(p) => stores
                .get(&p.store_id)
                .ok()
                .map(|s| (p.store_id.clone(), s.total_bytes() as f64)),
            _ => None,
        })
        .collect()
}

/// Store sizes extrapolated from the files the trace actually touched.
pub fn store_sizes_from_snapshot(snapshot: &TraceSnapshot) -> BTreeMap<String, f64> {
    snapshot
        .stores
        .iter()
        .flatten()
        .filter_map(|(id, obs)| {
            let sizes: Vec<u64> = obs.observed.values().copied().collect();
            storage::estimate_source_size(&sizes, obs.file_count)
                .ok()
                .map(|total| (id.clone(), total))
        })
        .collect()
}

/// Cardinality, element size and cacheability of one operator's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Materialization {
    pub cardinality: Estimate,
    pub bytes_per_element: Estimate,
    pub materialized_bytes: Estimate,
    /// Completions per input: elements out per child element, or records per
    /// byte read for sources.
    pub local_ratio: Estimate,
    pub cacheable: bool,
    /// The operator sits below a Cache and costs nothing once it is warm.
    pub below_cache: bool,
}

/// Estimates how large each operator's full output would be if it were
/// cached, from the trace and the total size of every store.
pub fn materialization(
    snapshot: &TraceSnapshot,
    store_sizes: &BTreeMap<String, f64>,
) -> BTreeMap<String, Materialization> {
    let spec = &snapshot.spec;
    let closure = randomness_closure(spec);
    let mut below_cache = BTreeSet::new();
    for n in spec.nodes.iter().filter(|n| n.kind() == OpKind::Cache) {
        below_cache.extend(spec.descendants(&n.name));
    }
    let mut out = BTreeMap::new();
    let mut order = spec.bfs();
    order.reverse();
    for name in order {
        let node = spec.node(name).expect("bfs yields nodes");
        let c = snapshot.op(name).copied().unwrap_or_default();
        let completions = c.completions as f64;
        let bytes_per_element = if c.completions == 0 {
            Estimate::Unknown
        } else {
            Estimate::Known(c.bytes_produced as f64 / completions)
        };
        let child_n: Vec<Estimate> = node
            .children
            .iter()
            .map(|ch| {
                out.get(ch)
                    .map_or(Estimate::Unknown, |m: &Materialization| m.cardinality)
            })
            .collect();
        let child_c: f64 = node
            .children
            .iter()
            .filter_map(|ch| snapshot.op(ch))
            .map(|x| x.completions as f64)
            .sum();
        let summed = sum_estimates(&child_n);
        let (local_ratio, mut cardinality, exact_bytes) = match &node.op {
            Operator::Source(p) => {
                let ratio = if c.bytes_read == 0 {
                    Estimate::Unknown
                } else {
                    Estimate::Known(completions / c.bytes_read as f64)
                };
                let total = store_sizes.get(&p.store_id).copied();
                let n = match (total, ratio) {
                    (Some(t), Estimate::Known(r)) => Estimate::Known(t * r),
                    _ => Estimate::Unknown,
                };
                let bytes = match total {
                    Some(t) if c.bytes_read > 0 => {
                        Some((t * c.bytes_produced as f64 / c.bytes_read as f64).round())
                    }
                    _ => None,
                };
                (ratio, n, bytes)
            }
            Operator::Repeat(p) => {
                let n = match p.count {
                    RepeatCount::Infinite => Estimate::Unbounded,
                    RepeatCount::Finite(k) => summed.map(|v| v * k as f64),
                };
                (ratio_of(completions, child_c), n, None)
            }
            Operator::Take(p) => {
                let n = match summed {
                    Estimate::Known(v) => Estimate::Known(v.min(p.count as f64)),
                    _ => Estimate::Known(p.count as f64),
                };
                (ratio_of(completions, child_c), n, None)
            }
            Operator::Cache(_) | Operator::Prefetch(_) => (Estimate::Known(1.0), summed, None),
            _ => {
                let ratio = ratio_of(completions, child_c);
                let n = match (ratio, summed) {
                    (Estimate::Known(r), Estimate::Known(s)) => Estimate::Known(r * s),
                    (_, Estimate::Unbounded) => Estimate::Unbounded,
                    _ => Estimate::Unknown,
                };
                (ratio, n, None)
            }
        };
        if closure.contains(name) {
            cardinality = Estimate::Unbounded;
        }
        let materialized_bytes = match (cardinality, bytes_per_element, exact_bytes) {
            (Estimate::Known(_), _, Some(b)) => Estimate::Known(b),
            (Estimate::Known(n), Estimate::Known(b), None) => Estimate::Known(n * b),
            (Estimate::Unbounded, _, _) => Estimate::Unbounded,
            _ => Estimate::Unknown,
        };
        out.insert(
            name.to_string(),
            Materialization {
                cardinality,
                bytes_per_element,
                materialized_bytes,
                local_ratio,
                cacheable: !closure.contains(name),
                below_cache: below_cache.contains(name),
            },
        );
    }
    out
}

fn ratio_of(num: f64, den: f64) -> Estimate {
    if den > 0.0 {
        Estimate::Known(num / den)
    } else {
        Estimate::Unknown
    }
}

fn sum_estimates(xs: &[Estimate]) -> Estimate {
    let mut total = 0.0;
    for x in xs {
        match x {
            Estimate::Known(v) => total += v,
            Estimate::Unbounded => return Estimate::Unbounded,
            Estimate::Unknown => return Estimate::Unknown,
        }
    }
    if xs.is_empty() {
        Estimate::Unknown
    } else {
        Estimate::Known(total)
    }
}

/// Everything the optimizer needs to know about one operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpModel {
    pub kind: OpKind,
    pub visit_ratio: Estimate,
    pub rate: RateEstimate,
    pub completions: u64,
    pub cpu_seconds: f64,
    /// Filesystem bytes read by this operator during the trace.
    #[serde(default)]
    pub bytes_read: u64,
    /// Knob value in effect during the trace, if the operator has a knob.
    pub parallelism: Option<u32>,
    pub udf_parallelism: u32,
    #[serde(flatten)]
    pub materialization: Materialization,
}

impl OpModel {
    pub fn is_sequential(&self) -> bool {
        self.parallelism.is_none()
    }
}

/// The analysis of one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub root: String,
    /// Observed root throughput, minibatches per second.
    pub throughput: f64,
    pub io_bytes_per_minibatch: f64,
    pub wall_seconds: f64,
    pub ops: BTreeMap<String, OpModel>,
    pub spec: PipelineSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RateModel {
    /// Analyzes `snapshot`. Store sizes come from `stores` where it knows the
    /// store and are otherwise extrapolated from the files seen during the
    /// trace.
    pub fn from_snapshot(snapshot: &TraceSnapshot, stores: Option<&StoreRegistry>) -> Result<Self> {
        let mut sizes = store_sizes_from_snapshot(snapshot);
        if let Some(r) = stores {
            sizes.extend(store_sizes_from_registry(&snapshot.spec, r));
        }
        Self::with_store_sizes(snapshot, &sizes)
    }

    pub fn with_store_sizes(
        snapshot: &TraceSnapshot,
        sizes: &BTreeMap<String, f64>,
    ) -> Result<Self> {
        let visits = visit_ratios(snapshot)?;
        let rates = cpu_rates(snapshot, &visits);
        let mats = materialization(snapshot, sizes);
        let io = io_cost(snapshot)?;
        let mut warnings = Vec::new();
        let mut ops = BTreeMap::new();
        for node in &snapshot.spec.nodes {
            let c = snapshot.op(&node.name).copied().unwrap_or_default();
            let visit_ratio = visits.get(&node.name).copied().unwrap_or(Estimate::Unknown);
            let Some(mat) = mats.get(&node.name).cloned() else {
                continue;
            };
            if visit_ratio == Estimate::Unknown && !mat.below_cache {
                warnings.push(format!(
                    "`{}` has no completions; its rate is unknown",
                    node.name
                ));
            }
            ops.insert(
                node.name.clone(),
                OpModel {
                    kind: node.kind(),
                    visit_ratio,
                    rate: rates
                        .get(&node.name)
                        .copied()
                        .unwrap_or(RateEstimate::Unknown),
                    completions: c.completions,
                    cpu_seconds: c.cpu_ns as f64 * 1e-9,
                    bytes_read: c.bytes_read,
                    parallelism: node.parallelism.map(|_| c.parallelism.max(1)),
                    udf_parallelism: node.op.udf_parallelism(),
                    materialization: mat,
                },
            );
        }
        Ok(RateModel {
            root: snapshot.spec.root.clone(),
            throughput: snapshot.root_rate(),
            io_bytes_per_minibatch: io,
            wall_seconds: snapshot.wall_seconds,
            ops,
            spec: snapshot.spec.clone(),
            warnings,
        })
    }

    pub fn op(&self, name: &str) -> Option<&OpModel> {
        self.ops.get(name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rate model serializes")
    }

    /// Human-readable per-operator table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "X0 = {:.3} minibatches/s over {:.2} s, I/O {} B/minibatch",
            self.throughput,
            self.wall_seconds,
            human(self.io_bytes_per_minibatch)
        );
        let _ = writeln!(
            s,
            "{:<16} {:<10} {:>5} {:>10} {:>12} {:>10} {:>10} {:>12} {:>9}",
            "op", "kind", "par", "V", "R", "b", "n", "bytes", "cacheable"
        );
        for name in self.spec.bfs() {
            let Some(m) = self.ops.get(name) else {
                continue;
            };
            let par = m.parallelism.map_or("-".to_string(), |p| p.to_string());
            let _ = writeln!(
                s,
                "{:<16} {:<10} {:>5} {:>10} {:>12} {:>10} {:>10} {:>12} {:>9}",
                name,
                m.kind.to_string(),
                par,
                m.visit_ratio.to_string(),
                m.rate.to_string(),
                m.materialization.bytes_per_element.to_string(),
                m.materialization.cardinality.to_string(),
                m.materialization.materialized_bytes.to_string(),
                if m.materialization.cacheable {
                    "yes"
                } else {
                    "no"
                }
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

/// Operators ordered by aggregate capacity `theta_i * R_i`, slowest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub order: Vec<(String, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl Ranking {
    pub fn bottleneck(&self) -> Option<&str> {
        self.order.first().map(|(n, _)| n.as_str())
    }
}

/// Ranks operators by `theta_i * R_i` ascending. Sequential operators use
/// `theta = 1`; others use `theta` when given and otherwise their traced
/// parallelism. Infinite-rate operators never bottleneck and are left out;
/// ties are broken by name.
pub fn bottleneck_ranking(model: &RateModel, theta: &BTreeMap<String, f64>) -> Ranking {
    let mut order = Vec::new();
    let mut unknown = 0;
    for (name, m) in &model.ops {
        match m.rate {
            RateEstimate::Finite(r) => {
                let t = match m.parallelism {
                    None => 1.0,
                    Some(p) => theta.get(name).copied().unwrap_or(p as f64),
                };
                order.push((name.clone(), t * r));
            }
            RateEstimate::Infinite => {}
            RateEstimate::Unknown => unknown += 1,
        }
    }
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let diagnostic = order
        .is_empty()
        .then(|| format!("no operator has a known finite rate ({unknown} unknown)"));
    Ranking { order, diagnostic }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::spec::OperatorNode as N;
    use crate::tracer::OpCounters;

    fn counters(completions: u64, cpu_s: f64) -> OpCounters {
        OpCounters {
            completions,
            cpu_ns: (cpu_s * 1e9) as u64,
            parallelism: 1,
            ..OpCounters::default()
        }
    }

    fn snapshot(spec: PipelineSpec, ops: &[(&str, OpCounters)]) -> TraceSnapshot {
        TraceSnapshot {
            wall_seconds: 10.0,
            spec,
            ops: ops.iter().map(|(n, c)| (n.to_string(), *c)).collect(),
            timestamp: 0.0,
            stores: None,
        }
    }

    fn chain() -> PipelineSpec {
        PipelineSpec::new(
            "batch",
            vec![
                N::source("src", "s", 1),
                N::map("map", "src", 1.0, 1.0).with_parallelism(1),
                N::batch("batch", "map", 128),
            ],
        )
    }

    #[test]
    fn batching_visit_ratios() {
        let s = snapshot(
            chain(),
            &[
                ("src", counters(1280, 1.0)),
                ("map", counters(1280, 1.0)),
                ("batch", counters(10, 1.0)),
            ],
        );
        let v = visit_ratios(&s).unwrap();
        assert_eq!(v["src"], Estimate::Known(128.0));
        assert_eq!(v["map"], Estimate::Known(128.0));
        assert_eq!(v["batch"], Estimate::Known(1.0));
    }

    #[test]
    fn filter_visit_ratios() {
        let spec = PipelineSpec::new(
            "batch",
            vec![
                N::source("src", "s", 1),
                N::map("map", "src", 1.0, 1.0),
                N::filter("filter", "map", 0.5, 0.0),
                N::batch("batch", "filter", 4),
            ],
        );
        let s = snapshot(
            spec,
            &[
                ("src", counters(80, 0.0)),
                ("map", counters(80, 0.0)),
                ("filter", counters(40, 0.0)),
                ("batch", counters(10, 0.0)),
            ],
        );
        let v = visit_ratios(&s).unwrap();
        assert_eq!(v["map"], Estimate::Known(8.0));
        assert_eq!(v["filter"], Estimate::Known(4.0));
    }

    #[test]
    fn zero_completions_are_unknown_and_empty_root_errors() {
        let s = snapshot(
            chain(),
            &[
                ("src", counters(0, 0.5)),
                ("map", counters(5, 1.0)),
                ("batch", counters(1, 0.0)),
            ],
        );
        let v = visit_ratios(&s).unwrap();
        assert_eq!(v["src"], Estimate::Unknown);
        let r = cpu_rates(&s, &v);
        assert_eq!(r["src"], RateEstimate::Unknown);
        assert_eq!(r["batch"], RateEstimate::Infinite);

        let empty = snapshot(chain(), &[("batch", counters(0, 0.0))]);
        assert!(matches!(visit_ratios(&empty), Err(Error::EmptyTrace)));
    }

    #[test]
    fn decode_rate_arithmetic() {
        let s = snapshot(
            chain(),
            &[
                ("src", counters(1280, 0.0)),
                ("map", counters(1280, 512.0)),
                ("batch", counters(10, 0.0)),
            ],
        );
        let v = visit_ratios(&s).unwrap();
        let r = cpu_rates(&s, &v);
        let got = r["map"].finite().unwrap();
        assert!((got - 1280.0 / 512.0 / 128.0).abs() < 1e-12);
        assert_eq!(r["src"], RateEstimate::Infinite);
    }

    #[test]
    fn io_cost_per_minibatch() {
        let mut src = counters(1280, 0.0);
        src.bytes_read = 1280 * 112_640;
        let s = snapshot(
            chain(),
            &[
                ("src", src),
                ("map", counters(1280, 0.0)),
                ("batch", counters(10, 0.0)),
            ],
        );
        let io = io_cost(&s).unwrap();
        assert_eq!(io, 128.0 * 112_640.0);
        assert!((100e6 / io - 6.9).abs() < 0.05);
        assert!((30.0 * 15e6 - 450e6_f64).abs() < 1.0);
    }

    #[test]
    fn closure_of_random_crop() {
        let spec = PipelineSpec::new(
            "batch",
            vec![
                N::source("source", "s", 1),
                N::map("decode", "source", 1.0, 6.0),
                N::map("crop", "decode", 1.0, 1.0).random(),
                N::batch("batch", "crop", 2),
            ],
        );
        let c = randomness_closure(&spec);
        assert_eq!(c, ["crop", "batch"].iter().map(|s| s.to_string()).collect());
        assert!(randomness_closure(&chain()).is_empty());
    }

    #[test]
    fn source_and_decoded_materialization() {
        let spec = PipelineSpec::new(
            "decode",
            vec![
                N::source("src", "s", 112_640),
                N::map("decode", "src", 1.0, 6.0),
            ],
        );
        let mut src = counters(1000, 0.0);
        src.bytes_read = 1000 * 112_640;
        src.bytes_produced = src.bytes_read;
        let mut dec = counters(1000, 1.0);
        dec.bytes_produced = 6 * src.bytes_read;
        let s = snapshot(spec, &[("src", src), ("decode", dec)]);
        let sizes = BTreeMap::from([("s".to_string(), 154_618_822_656.0)]);
        let m = materialization(&s, &sizes);
        assert_eq!(
            m["src"].materialized_bytes,
            Estimate::Known(154_618_822_656.0)
        );
        let dec_bytes = m["decode"].materialized_bytes.known().unwrap();
        assert!((dec_bytes / (6.0 * 154_618_822_656.0) - 1.0).abs() < 1e-9);
        assert!(m["decode"].cacheable);
    }

    #[test]
    fn infinite_repeat_is_unbounded_and_take_caps_it() {
        let spec = PipelineSpec::new(
            "take",
            vec![
                N::source("src", "s", 1),
                N::repeat("rep", "src", RepeatCount::Infinite),
                N::map("m", "rep", 0.0, 1.0),
                N::take("take", "m", 50),
            ],
        );
        let mut src = counters(10, 0.0);
        src.bytes_read = 10;
        src.bytes_produced = 10;
        let s = snapshot(
            spec,
            &[
                ("src", src),
                ("rep", counters(10, 0.0)),
                ("m", counters(10, 0.0)),
                ("take", counters(10, 0.0)),
            ],
        );
        let m = materialization(&s, &BTreeMap::from([("s".to_string(), 100.0)]));
        assert_eq!(m["src"].cardinality, Estimate::Known(100.0));
        assert_eq!(m["rep"].cardinality, Estimate::Unbounded);
        assert_eq!(m["m"].materialized_bytes, Estimate::Unbounded);
        assert_eq!(m["take"].cardinality, Estimate::Known(50.0));
    }

    #[test]
    fn ranking_examples() {
        let spec = PipelineSpec::new(
            "b",
            vec![
                N::source("src", "s", 1),
                N::map("a", "src", 1.0, 1.0).with_parallelism(1),
                N::map("b", "a", 1.0, 1.0),
            ],
        );
        let s = snapshot(
            spec,
            &[
                ("src", counters(100, 0.0)),
                ("a", counters(100, 100.0 / 2.5)),
                ("b", counters(100, 100.0 / 50.0)),
            ],
        );
        let model = RateModel::with_store_sizes(&s, &BTreeMap::new()).unwrap();
        let rank = |t: f64| bottleneck_ranking(&model, &BTreeMap::from([("a".to_string(), t)]));
        assert_eq!(rank(1.0).bottleneck(), Some("a"));
        assert_eq!(rank(8.0).bottleneck(), Some("a"));
        let tie = rank(20.0);
        assert!((tie.order[0].1 - tie.order[1].1).abs() < 1e-9);
        assert_eq!(tie.bottleneck(), Some("a"));
    }

    #[test]
    fn estimates_serialize_as_numbers_or_tags() {
        let v =
            serde_json::to_string(&[Estimate::Known(1.5), Estimate::Unbounded, Estimate::Unknown])
                .unwrap();
        assert_eq!(v, r#"[1.5,"UNBOUNDED","UNKNOWN"]"#);
        let back: Vec<Estimate> = serde_json::from_str(&v).unwrap();
        assert_eq!(back[1], Estimate::Unbounded);
        let r = serde_json::to_string(&RateEstimate::Infinite).unwrap();
        assert_eq!(r, r#""INFINITE""#);
    }
}
