//! Per-operator counters with exclusive active-time attribution.
//!
//! Every thread that executes operator code keeps a stack of the operators it
//! is currently inside. Time is charged to the top of that stack: entering a
//! child stops the parent's timer, returning from the child restarts it, so
//! nested operators never double count.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering::Relaxed};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::engine::cpu::{active_ns, now_ns};
use crate::engine::spec::PipelineSpec;
use crate::error::{Error, Result};

/// One completion observed by the optional event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct YieldEvent {
    pub op: Arc<str>,
    pub bytes: u64,
}

type EventLog = Arc<Mutex<Vec<YieldEvent>>>;

/// Live counters of one operator.
#[derive(Debug)]
pub struct OpStats {
    name: Arc<str>,
    arrivals: AtomicU64,
    completions: AtomicU64,
    cpu_ns: AtomicU64,
    bytes_produced: AtomicU64,
    bytes_read: AtomicU64,
    parallelism: AtomicU32,
    log: Option<EventLog>,
}

impl OpStats {
    fn new(name: &str, parallelism: u32, log: Option<EventLog>) -> Self {
        OpStats {
            name: name.into(),
            arrivals: AtomicU64::new(0),
            completions: AtomicU64::new(0),
            cpu_ns: AtomicU64::new(0),
            bytes_produced: AtomicU64::new(0),
            bytes_read: AtomicU64::new(0),
            parallelism: AtomicU32::new(parallelism),
            log,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_parallelism(&self, p: u32) {
        self.parallelism.store(p, Relaxed);
    }

    fn counters(&self) -> OpCounters {
        OpCounters {
            arrivals: self.arrivals.load(Relaxed),
            completions: self.completions.load(Relaxed),
            cpu_ns: self.cpu_ns.load(Relaxed),
            bytes_produced: self.bytes_produced.load(Relaxed),
            bytes_read: self.bytes_read.load(Relaxed),
            parallelism: self.parallelism.load(Relaxed),
        }
    }
}

struct Frames {
    stack: Vec<Arc<OpStats>>,
    last: u64,
}

thread_local! {
    static FRAMES: RefCell<Frames> = const { RefCell::new(Frames { stack: Vec::new(), last: 0 }) };
}

/// Marks the start of a call into `op`.
#[inline]
pub fn enter(op: &Arc<OpStats>) {
    FRAMES.with(|f| {
        let mut f = f.borrow_mut();
        let now = active_ns();
        if let Some(top) = f.stack.last() {
            top.cpu_ns.fetch_add(now.saturating_sub(f.last), Relaxed);
        }
        f.stack.push(op.clone());
        f.last = now;
    })
}

/// Marks the return from the innermost [`enter`]. `produced` carries the
/// payload size when the call yielded an element.
#[inline]
pub fn exit(produced: Option<u64>) {
    FRAMES.with(|f| {
        let mut f = f.borrow_mut();
        let now = active_ns();
        let Some(op) = f.stack.pop() else { return };
        op.cpu_ns.fetch_add(now.saturating_sub(f.last), Relaxed);
        f.last = now;
        if let Some(bytes) = produced {
            op.completions.fetch_add(1, Relaxed);
            op.bytes_produced.fetch_add(bytes, Relaxed);
            if let Some(log) = &op.log {
                log.lock().unwrap().push(YieldEvent {
                    op: op.name.clone(),
                    bytes,
                });
            }
            if let Some(parent) = f.stack.last() {
                parent.arrivals.fetch_add(1, Relaxed);
            }
        }
    })
}

/// Makes `op` the bottom frame of the calling worker thread, so time spent
/// between child calls is charged to it.
pub fn begin_worker(op: &Arc<OpStats>) {
    enter(op);
}

/// Flushes the worker's pending time and clears its bottom frame.
pub fn end_worker() {
    exit(None);
}

/// Attributes filesystem bytes to the operator currently executing on this
/// thread.
pub fn record_read(bytes: u64) {
    FRAMES.with(|f| {
        if let Some(top) = f.borrow().stack.last() {
            top.bytes_read.fetch_add(bytes, Relaxed);
        }
    })
}

/// Charges time spent on this thread since the last boundary to the current
/// top frame without changing the stack.
pub fn flush() {
    FRAMES.with(|f| {
        let mut f = f.borrow_mut();
        let now = active_ns();
        if let Some(top) = f.stack.last() {
            top.cpu_ns.fetch_add(now.saturating_sub(f.last), Relaxed);
        }
        f.last = now;
    })
}

/// Counter sink shared by every iterator of one tree.
#[derive(Debug)]
pub struct Tracer {
    spec: PipelineSpec,
    ops: BTreeMap<String, Arc<OpStats>>,
    start_ns: AtomicU64,
    log: Option<EventLog>,
    stores: Mutex<BTreeMap<String, StoreObservation>>,
}

impl Tracer {
    pub fn new(spec: &PipelineSpec) -> Arc<Self> {
        Self::build(spec, None)
    }

    /// A tracer that additionally records every completion in order.
    pub fn with_event_log(spec: &PipelineSpec) -> Arc<Self> {
        Self::build(spec, Some(Arc::new(Mutex::new(Vec::new()))))
    }

    fn build(spec: &PipelineSpec, log: Option<EventLog>) -> Arc<Self> {
        let ops = spec
            .nodes
            .iter()
            .map(|n| {
                let p = n.parallelism.unwrap_or(1);
                (
                    n.name.clone(),
                    Arc::new(OpStats::new(&n.name, p, log.clone())),
                )
            })
            .collect();
        Arc::new(Tracer {
            spec: spec.clone(),
            ops,
            start_ns: AtomicU64::new(now_ns()),
            log,
            stores: Mutex::new(BTreeMap::new()),
        })
    }

    /// Restarts the wall-clock window without touching the counters.
    pub fn restart_window(&self) {
        self.start_ns.store(now_ns(), Relaxed);
    }

    pub fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    /// Counter handle for `name`. Unknown names are a programming error.
    pub fn op(&self, name: &str) -> Arc<OpStats> {
        self.ops
            .get(name)
            .unwrap_or_else(|| panic!("tracer has no operator `{name}`"))
            .clone()
    }

    pub fn events(&self) -> Vec<YieldEvent> {
        self.log
            .as_ref()
            .map(|l| l.lock().unwrap().clone())
            .unwrap_or_default()
    }

    /// Records the size of a file a source has opened, for source-size
    /// estimation from a subsample.
    pub fn observe_file(&self, store: &str, file_count: usize, file: usize, size: u64) {
        let mut stores = self.stores.lock().unwrap();
        let entry = stores.entry(store.to_string()).or_default();
        entry.file_count = file_count;
        entry.observed.insert(file, size);
    }

    pub fn wall_seconds(&self) -> f64 {
        Duration::from_nanos(now_ns() - self.start_ns.load(Relaxed)).as_secs_f64()
    }

    /// Copies every counter. Fails with [`Error::EmptyTrace`] when the root has
    /// not completed anything, unless `allow_empty` is set.
    pub fn snapshot(&self, allow_empty: bool) -> Result<TraceSnapshot> {
        let wall = self.wall_seconds().max(1e-9);
        let ops: BTreeMap<String, OpCounters> = self
            .ops
            .iter()
            .map(|(k, v)| (k.clone(), v.counters()))
            .collect();
        if !allow_empty && ops.get(&self.spec.root).is_none_or(|c| c.completions == 0) {
            return Err(Error::EmptyTrace);
        }
        let stores = self.stores.lock().unwrap().clone();
        Ok(TraceSnapshot {
            wall_seconds: wall,
            spec: self.spec.clone(),
            ops,
            timestamp: unix_now(),
            stores: (!stores.is_empty()).then_some(stores),
        })
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Frozen counters of one operator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub arrivals: u64,
    pub completions: u64,
    pub cpu_ns: u64,
    pub bytes_produced: u64,
    pub bytes_read: u64,
    pub parallelism: u32,
}

impl OpCounters {
    fn minus(&self, early: &OpCounters) -> OpCounters {
        OpCounters {
            arrivals: self.arrivals.saturating_sub(early.arrivals),
            completions: self.completions.saturating_sub(early.completions),
            cpu_ns: self.cpu_ns.saturating_sub(early.cpu_ns),
            bytes_produced: self.bytes_produced.saturating_sub(early.bytes_produced),
            bytes_read: self.bytes_read.saturating_sub(early.bytes_read),
            parallelism: self.parallelism,
        }
    }

    fn dominates(&self, other: &OpCounters) -> bool {
        self.arrivals >= other.arrivals
            && self.completions >= other.completions
            && self.cpu_ns >= other.cpu_ns
            && self.bytes_produced >= other.bytes_produced
            && self.bytes_read >= other.bytes_read
    }
}

/// File sizes a source has seen, out of `file_count` files in its store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreObservation {
    pub file_count: usize,
    pub observed: BTreeMap<usize, u64>,
}

/// A consistent copy of every operator's counters plus the program that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSnapshot {
    pub wall_seconds: f64,
    pub spec: PipelineSpec,
    pub ops: BTreeMap<String, OpCounters>,
    #[serde(default)]
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stores: Option<BTreeMap<String, StoreObservation>>,
}

impl TraceSnapshot {
    pub fn op(&self, name: &str) -> Option<&OpCounters> {
        self.ops.get(name)
    }

    pub fn root_completions(&self) -> u64 {
        self.ops.get(&self.spec.root).map_or(0, |c| c.completions)
    }

    /// Observed root throughput in elements per second.
    pub fn root_rate(&self) -> f64 {
        self.root_completions() as f64 / self.wall_seconds
    }

    /// Counters accumulated between `early` and `self`.
    pub fn delta(&self, early: &TraceSnapshot) -> TraceSnapshot {
        let ops = self
            .ops
            .iter()
            .map(|(k, v)| {
                let base = early.ops.get(k).copied().unwrap_or_default();
                (k.clone(), v.minus(&base))
            })
            .collect();
        TraceSnapshot {
            wall_seconds: (self.wall_seconds - early.wall_seconds).max(1e-9),
            spec: self.spec.clone(),
            ops,
            timestamp: self.timestamp,
            stores: self.stores.clone(),
        }
    }

    /// True when every counter in `self` is at least its value in `other`.
    pub fn dominates(&self, other: &TraceSnapshot) -> bool {
        other
            .ops
            .iter()
            .all(|(k, o)| self.ops.get(k).is_some_and(|s| s.dominates(o)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let snap: TraceSnapshot =
            serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
                context: format!("trace snapshot at `{}`", e.path()),
                message: e.inner().to_string(),
            })?;
        for node in &snap.spec.nodes {
            if !snap.ops.contains_key(&node.name) {
                return Err(Error::Parse {
                    context: format!("trace snapshot at `ops.{}`", node.name),
                    message: format!("missing entry for node `{}`", node.name),
                });
            }
        }
        if !(snap.wall_seconds > 0.0) {
            return Err(Error::Parse {
                context: "trace snapshot at `wall_seconds`".into(),
                message: "window must be positive".into(),
            });
        }
        Ok(snap)
    }

    pub fn dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
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
}
