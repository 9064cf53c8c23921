//! Mechanical edits of a [`PipelineSpec`]. Every edit returns a new spec and
//! leaves its input untouched.

use serde::{Deserialize, Serialize};

use crate::engine::spec::{
    CacheParams, OpKind, Operator, OperatorNode, PipelineSpec, PrefetchParams,
};
use crate::engine::{instantiate, EngineOptions};
use crate::error::{Error, Result};
use crate::optimizer::{self, LiveOptions, ResourceBudget, TuningPlan};
use crate::rates::randomness_closure;
use crate::storage::StoreRegistry;

/// The knob value of `node`, or `None` when it has no parallelism knob.
pub fn get_parallelism(spec: &PipelineSpec, node: &str) -> Result<Option<u32>> {
    let n = spec
        .node(node)
        .ok_or_else(|| Error::UnknownNode(node.to_string()))?;
    Ok(n.parallelism)
}

pub fn set_parallelism(spec: &PipelineSpec, node: &str, k: u32) -> Result<PipelineSpec> {
    let mut out = spec.clone();
    let n = out
        .node_mut(node)
        .ok_or_else(|| Error::UnknownNode(node.to_string()))?;
    if !n.is_tunable() {
        return Err(Error::NotTunable(node.to_string()));
    }
    if k < 1 {
        return Err(Error::InvalidParallelism(k));
    }
    n.parallelism = Some(k);
    Ok(out)
}

/// An operator that can be spliced onto an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    Cache,
    Prefetch(u64),
}

/// Splices a new operator between `node` and its parent (or above the root).
/// The new node is named `<node>__cache` or `<node>__prefetch`, with a
/// numeric suffix if that name is taken.
pub fn insert_after(spec: &PipelineSpec, node: &str, what: Insertion) -> Result<PipelineSpec> {
    if spec.node(node).is_none() {
        return Err(Error::UnknownNode(node.to_string()));
    }
    let (suffix, op) = match what {
        Insertion::Cache => {
            if randomness_closure(spec).contains(node) {
                return Err(Error::RandomCache(node.to_string()));
            }
            ("cache", Operator::Cache(CacheParams {}))
        }
        Insertion::Prefetch(buffer_size) => {
            if buffer_size < 1 {
                return Err(Error::InvalidArgument(
                    "prefetch buffer must be at least 1".into(),
                ));
            }
            (
                "prefetch",
                Operator::Prefetch(PrefetchParams { buffer_size }),
            )
        }
    };
    let mut name = format!("{node}__{suffix}");
    let mut i = 2;
    while spec.node(&name).is_some() {
        name = format!("{node}__{suffix}{i}");
        i += 1;
    }
    let mut out = spec.clone();
    match spec.parent_of(node) {
        Some(parent) => {
            let p = out.node_mut(parent).expect("parent exists");
            for c in p.children.iter_mut().filter(|c| *c == node) {
                *c = name.clone();
            }
        }
        None => out.root = name.clone(),
    }
    out.nodes.push(OperatorNode::new(name, op, &[node]));
    Ok(out)
}

/// Applies every edit in `plan` or none of them. The result must validate.
pub fn apply_plan(spec: &PipelineSpec, plan: &TuningPlan) -> Result<PipelineSpec> {
    let mut out = spec.clone();
    for (node, k) in &plan.integer_parallelism {
        out = set_parallelism(&out, node, *k)?;
    }
    for (node, buffer) in &plan.prefetch {
        out = insert_after(&out, node, Insertion::Prefetch(*buffer as u64))?;
    }
    if let Some(site) = &plan.cache_site {
        out = insert_after(&out, site, Insertion::Cache)?;
    }
    out.validated()?;
    Ok(out)
}

/// Removes every Cache operator, reconnecting its child to its parent.
pub fn strip_caches(spec: &PipelineSpec) -> PipelineSpec {
    let mut out = spec.clone();
    while let Some(cache) = out
        .nodes
        .iter()
        .find(|n| n.kind() == OpKind::Cache)
        .cloned()
    {
        let child = cache.children.first().cloned().unwrap_or_default();
        match out.parent_of(&cache.name).map(str::to_string) {
            Some(parent) => {
                let p = out.node_mut(&parent).expect("parent exists");
                for c in p.children.iter_mut().filter(|c| **c == cache.name) {
                    *c = child.clone();
                }
            }
            None => out.root = child,
        }
        out.nodes.retain(|n| n.name != cache.name);
    }
    out
}

/// Payload size of the first root element, used to check that candidates
/// produce the same kind of output.
fn root_signature(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    engine: EngineOptions,
) -> Result<Option<u64>> {
    let mut tree = instantiate(spec, stores, None, engine)?;
    let first = tree.next()?.map(|e| e.payload_bytes);
    tree.close();
    Ok(first)
}

#[derive(Debug, Clone, Serialize)]
pub struct CandidateReport {
    pub index: usize,
    pub root: String,
    pub predicted_x: f64,
    pub plan: TuningPlan,
}

#[derive(Debug, Clone, Serialize)]
pub struct PickReport {
    pub chosen: usize,
    /// The winning candidate after optimization.
    pub spec: PipelineSpec,
    pub candidates: Vec<CandidateReport>,
}

/// Optimizes every candidate and keeps the one with the highest predicted
/// throughput. Caches written into candidates are treated as suggestions and
/// removed before planning.
pub fn pick_best(
    candidates: &[PipelineSpec],
    stores: &StoreRegistry,
    budget: &ResourceBudget,
    opts: &LiveOptions,
) -> Result<PickReport> {
    match candidates {
        [] => {
            return Err(Error::InvalidArgument(
                "pick_best needs at least one candidate".into(),
            ))
        }
        [only] => {
            return Ok(PickReport {
                chosen: 0,
                spec: only.clone(),
                candidates: Vec::new(),
            })
        }
        _ => {}
    }
    let stripped: Vec<PipelineSpec> = candidates.iter().map(strip_caches).collect();
    let signatures = stripped
        .iter()
        .map(|s| root_signature(s, stores, opts.engine))
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = signatures.iter().position(|s| *s != signatures[0]) {
        return Err(Error::SignatureMismatch(format!(
            "candidate {i} yields root elements of {:?} bytes, candidate 0 yields {:?}",
            signatures[i], signatures[0]
        )));
    }
    let mut reports = Vec::new();
    let mut best: Option<(usize, f64, PipelineSpec)> = None;
    for (index, spec) in stripped.iter().enumerate() {
        let outcome = optimizer::optimize_live(spec, stores, budget, opts)?;
        let plan = outcome.plans[0].clone();
        let predicted_x = plan.predicted();
        if best.as_ref().is_none_or(|b| predicted_x > b.1) {
            best = Some((index, predicted_x, outcome.spec));
        }
        reports.push(CandidateReport {
            index,
            root: spec.root.clone(),
            predicted_x,
            plan,
        });
    }
    let (chosen, _, spec) = best.expect("at least two candidates");
    Ok(PickReport {
        chosen,
        spec,
        candidates: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::presets;

    #[test]
    fn knobs_read_and_write() {
        let spec = presets::resnet_shape();
        assert_eq!(get_parallelism(&spec, "decode").unwrap(), Some(1));
        assert_eq!(get_parallelism(&spec, "batch").unwrap(), None);
        assert!(matches!(
            get_parallelism(&spec, "nope"),
            Err(Error::UnknownNode(_))
        ));
        let edited = set_parallelism(&spec, "decode", 7).unwrap();
        assert_eq!(get_parallelism(&edited, "decode").unwrap(), Some(7));
        assert_eq!(get_parallelism(&spec, "decode").unwrap(), Some(1));
        assert!(matches!(
            set_parallelism(&spec, "batch", 2),
            Err(Error::NotTunable(_))
        ));
        assert!(matches!(
            set_parallelism(&spec, "decode", 0),
            Err(Error::InvalidParallelism(0))
        ));
    }

    #[test]
    fn only_the_knob_changes() {
        let spec = presets::resnet_shape();
        let before = spec.to_json();
        let edited = set_parallelism(&spec, "decode", 8).unwrap().to_json();
        let diff: Vec<_> = before
            .lines()
            .zip(edited.lines())
            .filter(|(a, b)| a != b)
            .collect();
        assert_eq!(diff.len(), 1);
        assert!(diff[0].1.contains("\"parallelism\": 8"));
        assert_eq!(spec.to_json(), before);
    }

    #[test]
    fn insertions() {
        let spec = presets::resnet_shape();
        let cached = insert_after(&spec, "interleave", Insertion::Cache).unwrap();
        assert_eq!(
            cached.node("decode").unwrap().children,
            ["interleave__cache"]
        );
        assert_eq!(
            cached.node("interleave__cache").unwrap().children,
            ["interleave"]
        );
        assert_eq!(cached.validate(), Ok(()));

        let pre = insert_after(&spec, "batch", Insertion::Prefetch(4)).unwrap();
        assert_eq!(pre.root, "batch__prefetch");
        let again = insert_after(&pre, "batch", Insertion::Prefetch(2)).unwrap();
        assert!(again.node("batch__prefetch2").is_some());
        assert_eq!(again.validate(), Ok(()));

        assert!(matches!(
            insert_after(&spec, "crop", Insertion::Cache),
            Err(Error::RandomCache(_))
        ));
    }

    #[test]
    fn plan_application() {
        let spec = presets::resnet_shape();
        assert_eq!(apply_plan(&spec, &TuningPlan::empty()).unwrap(), spec);

        let mut plan = TuningPlan::empty();
        plan.integer_parallelism.insert("decode".into(), 16);
        plan.cache_site = Some("interleave".into());
        plan.prefetch.insert("batch".into(), 2);
        let out = apply_plan(&spec, &plan).unwrap();
        assert_eq!(get_parallelism(&out, "decode").unwrap(), Some(16));
        assert_eq!(out.root, "batch__prefetch");
        assert!(out.node("interleave__cache").is_some());

        plan.prefetch.insert("missing".into(), 2);
        assert!(matches!(
            apply_plan(&spec, &plan),
            Err(Error::UnknownNode(_))
        ));
    }

    #[test]
    fn caches_are_stripped() {
        let spec = presets::resnet_shape();
        let cached = insert_after(&spec, "interleave", Insertion::Cache).unwrap();
        assert_eq!(strip_caches(&cached), spec);
        assert!(insert_after(&spec, "batch", Insertion::Cache).is_err());
    }
}
