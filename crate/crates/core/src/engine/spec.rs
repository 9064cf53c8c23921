//! Declarative pipeline graphs.
//!
//! A [`PipelineSpec`] is a tree of named operators serialized as
//! `{"root": name, "nodes": [{"name", "kind", "children", "params", "parallelism"?}]}`.
//! Specs are plain data: validation reports violations instead of failing, and
//! every rewrite works on a copy.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

fn one_f64() -> f64 {
    1.0
}

fn one_u32() -> u32 {
    1
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceParams {
    pub store_id: String,
    /// Mean record size; files are split into records of this size with a
    /// short remainder record at the end.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes_per_record: Option<u64>,
    /// Used when `bytes_per_record` is absent: every file is split evenly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records_per_file: Option<u64>,
    #[serde(default)]
    pub cpu_cost_per_element: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterleaveParams {
    pub cycle_length: u32,
    #[serde(default)]
    pub cpu_cost_per_element: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapParams {
    /// Busy-work per input element, in microseconds.
    pub cpu_cost_per_element: f64,
    #[serde(default = "one_f64")]
    pub byte_ratio: f64,
    #[serde(default = "one_f64")]
    pub input_output_ratio: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub is_random: bool,
    #[serde(default = "one_u32")]
    pub udf_internal_parallelism: u32,
}

impl Default for MapParams {
    fn default() -> Self {
        MapParams {
            cpu_cost_per_element: 0.0,
            byte_ratio: 1.0,
            input_output_ratio: 1.0,
            is_random: false,
            udf_internal_parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    pub keep_probability: f64,
    #[serde(default)]
    pub cpu_cost_per_element: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchParams {
    pub batch_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleParams {
    pub buffer_size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepeatCount {
    Finite(u64),
    Infinite,
}

impl Serialize for RepeatCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RepeatCount::Finite(n) => s.serialize_u64(*n),
            RepeatCount::Infinite => s.serialize_str("INFINITE"),
        }
    }
}

impl<'de> Deserialize<'de> for RepeatCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(RepeatCount::Finite(n)),
            Raw::S(s) if s == "INFINITE" => Ok(RepeatCount::Infinite),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "repeat count must be an integer or \"INFINITE\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatParams {
    pub count: RepeatCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefetchParams {
    pub buffer_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TakeParams {
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CacheParams {}

/// Operator kind together with its kind-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params")]
pub enum Operator {
    Source(SourceParams),
    Interleave(InterleaveParams),
    Map(MapParams),
    Filter(FilterParams),
    Shuffle(ShuffleParams),
    Repeat(RepeatParams),
    Batch(BatchParams),
    Prefetch(PrefetchParams),
    Cache(CacheParams),
    Take(TakeParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Source,
    Interleave,
    Map,
    Filter,
    Shuffle,
    Repeat,
    Batch,
    Prefetch,
    Cache,
    Take,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl Operator {
    pub fn kind(&self) -> OpKind {
        match self {
            Operator::Source(_) => OpKind::Source,
            Operator::Interleave(_) => OpKind::Interleave,
            Operator::Map(_) => OpKind::Map,
            Operator::Filter(_) => OpKind::Filter,
            Operator::Shuffle(_) => OpKind::Shuffle,
            Operator::Repeat(_) => OpKind::Repeat,
            Operator::Batch(_) => OpKind::Batch,
            Operator::Prefetch(_) => OpKind::Prefetch,
            Operator::Cache(_) => OpKind::Cache,
            Operator::Take(_) => OpKind::Take,
        }
    }

    /// Per-element busy-work in microseconds.
    pub fn cpu_cost_us(&self) -> f64 {
        match self {
            Operator::Source(p) => p.cpu_cost_per_element,
            Operator::Interleave(p) => p.cpu_cost_per_element,
            Operator::Map(p) => p.cpu_cost_per_element,
            Operator::Filter(p) => p.cpu_cost_per_element,
            _ => 0.0,
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self, Operator::Map(p) if p.is_random)
    }

    /// Extra workers consumed per unit of nominal parallelism.
    pub fn udf_parallelism(&self) -> u32 {
        match self {
            Operator::Map(p) => p.udf_internal_parallelism.max(1),
            _ => 1,
        }
    }
}

impl OpKind {
    /// Kinds that may carry a parallelism knob.
    pub fn is_parallelizable(self) -> bool {
        matches!(self, OpKind::Map | OpKind::Interleave)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub name: String,
    #[serde(flatten)]
    pub op: Operator,
    #[serde(default)]
    pub children: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<u32>,
}

impl OperatorNode {
    pub fn new(name: impl Into<String>, op: Operator, children: &[&str]) -> Self {
        OperatorNode {
            name: name.into(),
            op,
            children: children.iter().map(|c| c.to_string()).collect(),
            parallelism: None,
        }
    }

    pub fn source(name: &str, store_id: &str, bytes_per_record: u64) -> Self {
        Self::new(
            name,
            Operator::Source(SourceParams {
                store_id: store_id.into(),
                bytes_per_record: Some(bytes_per_record),
                records_per_file: None,
                cpu_cost_per_element: 0.0,
            }),
            &[],
        )
    }

    /// Source splitting each file into `records` equal records.
    pub fn source_records(name: &str, store_id: &str, records: u64) -> Self {
        Self::new(
            name,
            Operator::Source(SourceParams {
                store_id: store_id.into(),
                bytes_per_record: None,
                records_per_file: Some(records),
                cpu_cost_per_element: 0.0,
            }),
            &[],
        )
    }

    pub fn interleave(name: &str, children: &[&str], cycle_length: u32) -> Self {
        Self::new(
            name,
            Operator::Interleave(InterleaveParams {
                cycle_length,
                cpu_cost_per_element: 0.0,
            }),
            children,
        )
    }

    pub fn map(name: &str, child: &str, cost_us: f64, byte_ratio: f64) -> Self {
        Self::new(
            name,
            Operator::Map(MapParams {
                cpu_cost_per_element: cost_us,
                byte_ratio,
                ..MapParams::default()
            }),
            &[child],
        )
    }

    pub fn filter(name: &str, child: &str, keep_probability: f64, cost_us: f64) -> Self {
        Self::new(
            name,
            Operator::Filter(FilterParams {
                keep_probability,
                cpu_cost_per_element: cost_us,
            }),
            &[child],
        )
    }

    pub fn batch(name: &str, child: &str, batch_size: u64) -> Self {
        Self::new(name, Operator::Batch(BatchParams { batch_size }), &[child])
    }

    pub fn shuffle(name: &str, child: &str, buffer_size: u64) -> Self {
        Self::new(
            name,
            Operator::Shuffle(ShuffleParams { buffer_size }),
            &[child],
        )
    }

    pub fn repeat(name: &str, child: &str, count: RepeatCount) -> Self {
        Self::new(name, Operator::Repeat(RepeatParams { count }), &[child])
    }

    pub fn prefetch(name: &str, child: &str, buffer_size: u64) -> Self {
        Self::new(
            name,
            Operator::Prefetch(PrefetchParams { buffer_size }),
            &[child],
        )
    }

    pub fn take(name: &str, child: &str, count: u64) -> Self {
        Self::new(name, Operator::Take(TakeParams { count }), &[child])
    }

    pub fn cache(name: &str, child: &str) -> Self {
        Self::new(name, Operator::Cache(CacheParams {}), &[child])
    }

    /// Marks a Map's function as randomized.
    pub fn random(mut self) -> Self {
        if let Operator::Map(p) = &mut self.op {
            p.is_random = true;
        }
        self
    }

    pub fn with_io_ratio(mut self, ratio: f64) -> Self {
        if let Operator::Map(p) = &mut self.op {
            p.input_output_ratio = ratio;
        }
        self
    }

    pub fn with_udf_parallelism(mut self, u: u32) -> Self {
        if let Operator::Map(p) = &mut self.op {
            p.udf_internal_parallelism = u;
        }
        self
    }

    pub fn with_cost(mut self, cost_us: f64) -> Self {
        match &mut self.op {
            Operator::Source(p) => p.cpu_cost_per_element = cost_us,
            Operator::Interleave(p) => p.cpu_cost_per_element = cost_us,
            Operator::Map(p) => p.cpu_cost_per_element = cost_us,
            Operator::Filter(p) => p.cpu_cost_per_element = cost_us,
            _ => {}
        }
        self
    }

    pub fn with_parallelism(mut self, p: u32) -> Self {
        self.parallelism = Some(p);
        self
    }

    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }

    pub fn is_tunable(&self) -> bool {
        self.parallelism.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub root: String,
    pub nodes: Vec<OperatorNode>,
}

/// One broken invariant found by [`PipelineSpec::validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node: Option<String>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "{n}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl PipelineSpec {
    pub fn new(root: impl Into<String>, nodes: Vec<OperatorNode>) -> Self {
        PipelineSpec {
            root: root.into(),
            nodes,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            context: format!("pipeline spec at `{}`", e.path()),
            message: e.inner().to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { context, message } => Error::Parse {
                context: format!("{}: {context}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn node(&self, name: &str) -> Option<&OperatorNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut OperatorNode> {
        self.nodes.iter_mut().find(|n| n.name == name)
    }

    pub fn root_node(&self) -> Option<&OperatorNode> {
        self.node(&self.root)
    }

    /// Parent of every non-root node.
    pub fn parents(&self) -> HashMap<&str, &str> {
        let mut out = HashMap::new();
        for n in &self.nodes {
            for c in &n.children {
                out.insert(c.as_str(), n.name.as_str());
            }
        }
        out
    }

    pub fn parent_of(&self, name: &str) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| n.children.iter().any(|c| c == name))
            .map(|n| n.name.as_str())
    }

    /// Node names in breadth-first order from the root. Unreachable nodes are
    /// omitted.
    pub fn bfs(&self) -> Vec<&str> {
        let index: HashMap<&str, &OperatorNode> =
            self.nodes.iter().map(|n| (n.name.as_str(), n)).collect();
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut queue = std::collections::VecDeque::new();
        if index.contains_key(self.root.as_str()) {
            queue.push_back(self.root.as_str());
        }
        while let Some(name) = queue.pop_front() {
            if !seen.insert(name) {
                continue;
            }
            out.push(name);
            for c in &index[name].children {
                if index.contains_key(c.as_str()) {
                    queue.push_back(c.as_str());
                }
            }
        }
        out
    }

    /// Distance from the root (root = 0) for every reachable node.
    pub fn depths(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        let mut stack = vec![(self.root.clone(), 0usize)];
        while let Some((name, d)) = stack.pop() {
            if out.contains_key(&name) {
                continue;
            }
            if let Some(n) = self.node(&name) {
                for c in &n.children {
                    stack.push((c.clone(), d + 1));
                }
            }
            out.insert(name, d);
        }
        out
    }

    /// All nodes in the subtree below `name`, excluding `name` itself.
    pub fn descendants(&self, name: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack: Vec<String> = self
            .node(name)
            .map(|n| n.children.clone())
            .unwrap_or_default();
        while let Some(c) = stack.pop() {
            if let Some(n) = self.node(&c) {
                stack.extend(n.children.iter().cloned());
            }
            out.push(c);
        }
        out
    }

    /// Ancestors of `name` ordered from its parent up to the root.
    pub fn ancestors(&self, name: &str) -> Vec<String> {
        let parents = self.parents();
        let mut out = Vec::new();
        let mut cur = name;
        while let Some(p) = parents.get(cur) {
            if out.iter().any(|x: &String| x == p) {
                break;
            }
            out.push(p.to_string());
            cur = p;
        }
        out
    }

    /// Checks every structural and parameter invariant. Never mutates the
    /// spec; returns all violations found.
    pub fn validate(&self) -> std::result::Result<(), Vec<Violation>> {
        let mut v = Vec::new();
        let mut push = |node: Option<&str>, msg: String| {
            v.push(Violation {
                node: node.map(str::to_string),
                message: msg,
            })
        };

        let mut names = HashSet::new();
        for n in &self.nodes {
            if !names.insert(n.name.as_str()) {
                push(Some(&n.name), "duplicate node name".into());
            }
        }
        if self.node(&self.root).is_none() {
            push(None, format!("root `{}` is not a node", self.root));
        }

        let mut parent_count: HashMap<&str, usize> = HashMap::new();
        for n in &self.nodes {
            for c in &n.children {
                if self.node(c).is_none() {
                    push(Some(&n.name), format!("unknown child `{c}`"));
                }
                *parent_count.entry(c.as_str()).or_default() += 1;
            }
        }
        for n in &self.nodes {
            let pc = parent_count.get(n.name.as_str()).copied().unwrap_or(0);
            if n.name == self.root {
                if pc > 0 {
                    push(Some(&n.name), "root has a parent".into());
                }
            } else if pc != 1 {
                push(
                    Some(&n.name),
                    format!("node has {pc} parents, expected exactly one"),
                );
            }
        }
        let reachable: HashSet<&str> = self.bfs().into_iter().collect();
        for n in &self.nodes {
            if !reachable.contains(n.name.as_str()) {
                push(Some(&n.name), "node is not reachable from the root".into());
            }
        }

        for n in &self.nodes {
            let name = Some(n.name.as_str());
            let arity = n.children.len();
            match n.kind() {
                OpKind::Source if arity != 0 => push(name, "source must be a leaf".into()),
                OpKind::Interleave if arity == 0 => {
                    push(name, "interleave needs at least one child".into())
                }
                OpKind::Source | OpKind::Interleave => {}
                _ if arity != 1 => push(name, format!("expected one child, found {arity}")),
                _ => {}
            }
            if let Some(p) = n.parallelism {
                if !n.kind().is_parallelizable() {
                    push(name, "sequential operator has parallelism knob".into());
                } else if p == 0 {
                    push(name, "parallelism must be at least 1".into());
                }
            }
            let cost = n.op.cpu_cost_us();
            if !(cost >= 0.0 && cost.is_finite()) {
                push(name, "cpu_cost_per_element must be >= 0".into());
            }
            match &n.op {
                Operator::Source(p) => {
                    if p.bytes_per_record == Some(0) || p.records_per_file == Some(0) {
                        push(name, "record size and count must be positive".into());
                    }
                }
                Operator::Interleave(p) if p.cycle_length == 0 => {
                    push(name, "interleave cycle length must be >= 1".into())
                }
                Operator::Map(p) => {
                    if !(p.byte_ratio > 0.0 && p.byte_ratio.is_finite()) {
                        push(name, "byte_ratio must be > 0".into());
                    }
                    if !(p.input_output_ratio >= 0.0 && p.input_output_ratio.is_finite()) {
                        push(name, "input_output_ratio must be >= 0".into());
                    }
                    if p.udf_internal_parallelism == 0 {
                        push(name, "udf_internal_parallelism must be >= 1".into());
                    }
                }
                Operator::Filter(p) if !(0.0..=1.0).contains(&p.keep_probability) => {
                    push(name, "keep_probability must be in [0, 1]".into())
                }
                Operator::Batch(p) if p.batch_size == 0 => {
                    push(name, "batch size must be >= 1".into())
                }
                Operator::Shuffle(p) if p.buffer_size == 0 => {
                    push(name, "shuffle buffer must be >= 1".into())
                }
                Operator::Repeat(p) if p.count == RepeatCount::Finite(0) => {
                    push(name, "repeat count must be positive or INFINITE".into())
                }
                Operator::Prefetch(p) if p.buffer_size == 0 => {
                    push(name, "prefetch buffer must be >= 1".into())
                }
                Operator::Cache(_) => {
                    let random = self
                        .descendants(&n.name)
                        .iter()
                        .filter_map(|d| self.node(d))
                        .any(|d| d.op.is_random());
                    if random {
                        push(name, "cache at or above a random operator".into());
                    }
                }
                _ => {}
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(v)
        }
    }

    pub fn validated(&self) -> Result<()> {
        self.validate().map_err(Error::InvalidSpec)
    }
}
