//! Pull-based iterator runtime.
//!
//! [`instantiate`] turns a [`PipelineSpec`] into an [`IteratorTree`]. Every
//! operator is a [`DatasetIter`]; parents pull from children with `next()`.
//! Knob-bearing operators run their work on dedicated worker threads that
//! feed a bounded queue.

pub mod cpu;
mod ops;
pub mod spec;
mod tree;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

pub use cpu::{CpuModel, CpuPool};
pub use spec::{OpKind, Operator, OperatorNode, PipelineSpec, RepeatCount, Violation};
pub use tree::{
    instantiate, BenchBudget, BenchConfig, IteratorTree, StableOptions, StableTrace,
    ThroughputReport,
};

use crate::error::{Error, Result};
use crate::storage::StoreRegistry;
use crate::tracer::{self, OpStats, Tracer};

/// A synthetic data element. Only its size is materialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Element {
    pub payload_bytes: u64,
    /// Source file the element (or the first element of a batch) came from.
    pub provenance: usize,
}

/// One operator of an instantiated tree.
pub trait DatasetIter: Send {
    /// The next element, or `Ok(None)` at end of stream. Calling `next` again
    /// after end of stream keeps returning `Ok(None)`.
    fn next(&mut self) -> Result<Option<Element>>;

    /// Stops workers and releases children. Must be idempotent.
    fn close(&mut self);
}

pub(crate) type BoxIter = Box<dyn DatasetIter>;

/// Runtime options shared by every operator of a tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineOptions {
    pub cpu_model: CpuModel,
    pub seed: u64,
    /// When set, a Cache stops filling after this many elements and replays
    /// them in a loop, simulating its warm steady state.
    pub cache_probe: Option<usize>,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            cpu_model: CpuModel::default(),
            seed: 0,
            cache_probe: None,
        }
    }
}

/// Cooperative cancellation scope. A scope is cancelled when it or any of
/// its ancestors is.
#[derive(Debug, Default)]
pub(crate) struct Cancel {
    flag: AtomicBool,
    parent: Option<Arc<Cancel>>,
}

impl Cancel {
    pub(crate) fn root() -> Arc<Self> {
        Arc::new(Cancel::default())
    }

    pub(crate) fn child(self: &Arc<Self>) -> Arc<Self> {
        Arc::new(Cancel {
            flag: AtomicBool::new(false),
            parent: Some(self.clone()),
        })
    }

    pub(crate) fn cancel(&self) {
        self.flag.store(true, Ordering::Release);
    }

    pub(crate) fn is_cancelled(&self) -> bool {
        let mut cur = Some(self);
        while let Some(c) = cur {
            if c.flag.load(Ordering::Acquire) {
                return true;
            }
            cur = c.parent.as_deref();
        }
        false
    }
}

/// Elements held by a Cache operator across openings.
#[derive(Debug, Default)]
pub(crate) struct CacheState {
    pub(crate) elements: Mutex<Vec<Element>>,
    pub(crate) complete: AtomicBool,
}

/// Everything operators need to build their children and run work.
pub(crate) struct EngineCtx {
    pub(crate) spec: PipelineSpec,
    index: HashMap<String, usize>,
    pub(crate) stores: StoreRegistry,
    pub(crate) tracer: Option<Arc<Tracer>>,
    pub(crate) cpu: Arc<CpuPool>,
    pub(crate) options: EngineOptions,
    live_workers: Arc<AtomicUsize>,
    opens: Mutex<HashMap<String, u64>>,
    caches: Mutex<HashMap<String, Arc<CacheState>>>,
}

impl EngineCtx {
    pub(crate) fn new(
        spec: PipelineSpec,
        stores: StoreRegistry,
        tracer: Option<Arc<Tracer>>,
        options: EngineOptions,
    ) -> Self {
        let index = spec
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.name.clone(), i))
            .collect();
        EngineCtx {
            spec,
            index,
            stores,
            tracer,
            cpu: Arc::new(CpuPool::new(options.cpu_model)),
            options,
            live_workers: Arc::new(AtomicUsize::new(0)),
            opens: Mutex::new(HashMap::new()),
            caches: Mutex::new(HashMap::new()),
        }
    }

    pub(crate) fn node(&self, name: &str) -> Result<&OperatorNode> {
        self.index
            .get(name)
            .map(|&i| &self.spec.nodes[i])
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub(crate) fn stats(&self, name: &str) -> Option<Arc<OpStats>> {
        self.tracer.as_ref().map(|t| t.op(name))
    }

    /// Seed for the `n`-th opening of `node`, stable across runs.
    pub(crate) fn seed_for(&self, node: &str) -> u64 {
        let mut opens = self.opens.lock().unwrap();
        let n = opens.entry(node.to_string()).or_insert(0);
        let k = *n;
        *n += 1;
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ self.options.seed;
        for b in node.bytes().chain(k.to_le_bytes()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    pub(crate) fn cache_state(&self, node: &str) -> Arc<CacheState> {
        self.caches
            .lock()
            .unwrap()
            .entry(node.to_string())
            .or_default()
            .clone()
    }

    /// True when every Cache operator in the tree holds its full contents.
    pub(crate) fn caches_warm(&self) -> bool {
        let caches = self.caches.lock().unwrap();
        self.spec
            .nodes
            .iter()
            .filter(|n| n.kind() == OpKind::Cache)
            .all(|n| {
                caches
                    .get(&n.name)
                    .is_some_and(|c| c.complete.load(Ordering::Acquire))
            })
    }

    pub(crate) fn live_workers(&self) -> usize {
        self.live_workers.load(Ordering::SeqCst)
    }

    /// Spawns a worker thread that is counted in the worker census for its
    /// whole lifetime.
    pub(crate) fn spawn_worker<F>(&self, name: String, f: F) -> JoinHandle<()>
    where
        F: FnOnce() + Send + 'static,
    {
        struct Census(Arc<AtomicUsize>);
        impl Drop for Census {
            fn drop(&mut self) {
                self.0.fetch_sub(1, Ordering::SeqCst);
            }
        }
        self.live_workers.fetch_add(1, Ordering::SeqCst);
        let census = Census(self.live_workers.clone());
        std::thread::Builder::new()
            .name(name)
            .spawn(move || {
                let _census = census;
                cpu::tighten_timer_slack();
                f();
            })
            .expect("spawn worker thread")
    }

    /// Builds the iterator for `name` and, when tracing, wraps it so its
    /// counters are maintained.
    pub(crate) fn build(self: &Arc<Self>, name: &str, scope: &Arc<Cancel>) -> Result<BoxIter> {
        let node = self.node(name)?.clone();
        let inner = ops::build(self, &node, scope)?;
        Ok(self.traced(name, inner))
    }

    pub(crate) fn traced(&self, name: &str, inner: BoxIter) -> BoxIter {
        match self.stats(name) {
            Some(stats) => Box::new(Traced { inner, stats }),
            None => inner,
        }
    }
}

/// Maintains an operator's counters around every `next()`.
struct Traced {
    inner: BoxIter,
    stats: Arc<OpStats>,
}

impl DatasetIter for Traced {
    #[inline]
    fn next(&mut self) -> Result<Option<Element>> {
        tracer::enter(&self.stats);
        let out = self.inner.next();
        tracer::exit(match &out {
            Ok(Some(e)) => Some(e.payload_bytes),
            _ => None,
        });
        out
    }

    fn close(&mut self) {
        self.inner.close();
    }
}
