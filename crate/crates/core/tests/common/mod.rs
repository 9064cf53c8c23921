#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard};

use pipetune::engine::spec::{Operator, OperatorNode as N, PipelineSpec, RepeatCount};
use pipetune::optimizer::LpTerm;
use pipetune::storage::{FileStore, SizeDistribution, StoreRegistry};
use pipetune::tracer::{OpCounters, TraceSnapshot};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Serializes tests whose assertions depend on wall-clock timing.
pub fn timing_lock() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

/// Registry holding one constant-size store named `id`.
pub fn store(id: &str, files: usize, bytes: u64) -> StoreRegistry {
    let mut r = StoreRegistry::new();
    r.insert(
        id,
        FileStore::create(files, SizeDistribution::Constant { bytes }, 0).unwrap(),
    );
    r
}

/// Random valid pipelines built bottom-up, reading store `s`.
pub struct GraphGen {
    rng: ChaCha8Rng,
    nodes: Vec<N>,
    /// Allow randomized Maps and infinite Repeats.
    pub wild: bool,
    /// Interleaves read only sources, so the graph is a chain above them.
    pub chain: bool,
}

impl GraphGen {
    pub fn new(seed: u64) -> Self {
        GraphGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            nodes: Vec::new(),
            wild: true,
            chain: false,
        }
    }

    pub fn spec(&mut self, max_depth: usize) -> PipelineSpec {
        self.nodes.clear();
        let root = self.subtree(max_depth);
        PipelineSpec::new(root, std::mem::take(&mut self.nodes))
    }

    fn name(&self) -> String {
        format!("n{}", self.nodes.len())
    }

    fn push(&mut self, node: N) -> String {
        let name = node.name.clone();
        self.nodes.push(node);
        name
    }

    fn subtree(&mut self, depth: usize) -> String {
        if depth == 0 || self.rng.random_bool(0.1) {
            let bytes = self.rng.random_range(1_000..100_000);
            let name = self.name();
            return self.push(N::source(&name, "s", bytes));
        }
        let choice = self.rng.random_range(0..9);
        if choice == 8 {
            let k = self.rng.random_range(1..=3);
            let sub = if self.chain { 0 } else { depth - 1 };
            let children: Vec<String> = (0..k).map(|_| self.subtree(sub)).collect();
            let refs: Vec<&str> = children.iter().map(String::as_str).collect();
            let p = self.rng.random_range(1..=4);
            let name = self.name();
            return self.push(N::interleave(&name, &refs, 2).with_parallelism(p));
        }
        let child = self.subtree(depth - 1);
        let name = self.name();
        let node = match choice {
            0 | 1 => {
                let cost = self.rng.random_range(1.0..2000.0);
                let ratio = self.rng.random_range(0.25..6.0);
                let mut m = N::map(&name, &child, cost, ratio)
                    .with_parallelism(self.rng.random_range(1..=4));
                if self.wild && self.rng.random_bool(0.3) {
                    m = m.random();
                }
                m
            }
            2 => N::filter(&name, &child, [1.0, 0.5][self.rng.random_range(0..2)], 5.0),
            3 => N::batch(&name, &child, self.rng.random_range(1..64)),
            4 => N::shuffle(&name, &child, 16),
            5 if self.wild && self.rng.random_bool(0.4) => {
                N::repeat(&name, &child, RepeatCount::Infinite)
            }
            5 => N::repeat(
                &name,
                &child,
                RepeatCount::Finite(self.rng.random_range(1..4)),
            ),
            6 => N::take(&name, &child, self.rng.random_range(1..100_000)),
            _ => N::prefetch(&name, &child, 2),
        };
        self.push(node)
    }

    /// Counters consistent with the structure of `spec`: every operator's
    /// completions follow from its children's, costs are random.
    pub fn snapshot(&mut self, spec: &PipelineSpec) -> TraceSnapshot {
        let mut ops: BTreeMap<String, OpCounters> = BTreeMap::new();
        let mut order = spec.bfs();
        order.reverse();
        for name in order {
            let node = spec.node(name).unwrap();
            let kids: Vec<OpCounters> = node.children.iter().map(|c| ops[c]).collect();
            let c_in: u64 = kids.iter().map(|k| k.completions).sum();
            let b_in: u64 = kids.iter().map(|k| k.bytes_produced).sum();
            let bpe = if c_in == 0 {
                0.0
            } else {
                b_in as f64 / c_in as f64
            };
            let (completions, bytes_produced, bytes_read) = match &node.op {
                Operator::Source(p) => {
                    let n = self.rng.random_range(1_000..5_000);
                    let b = n * p.bytes_per_record.unwrap_or(1);
                    (n, b, b)
                }
                Operator::Map(p) => (c_in, (b_in as f64 * p.byte_ratio) as u64, 0),
                Operator::Filter(p) => {
                    let n = (c_in as f64 * p.keep_probability).ceil() as u64;
                    (n, (n as f64 * bpe) as u64, 0)
                }
                Operator::Batch(p) => (c_in.div_ceil(p.batch_size), b_in, 0),
                Operator::Repeat(_) => (2 * c_in, 2 * b_in, 0),
                Operator::Take(p) => {
                    let n = c_in.min(p.count);
                    (n, (n as f64 * bpe) as u64, 0)
                }
                _ => (c_in, b_in, 0),
            };
            let cost_us = node.op.cpu_cost_us();
            let completions = completions.max(1);
            ops.insert(
                name.to_string(),
                OpCounters {
                    arrivals: c_in,
                    completions,
                    cpu_ns: (completions as f64 * cost_us * 1000.0) as u64,
                    bytes_produced,
                    bytes_read,
                    parallelism: node.parallelism.unwrap_or(1),
                },
            );
        }
        TraceSnapshot {
            wall_seconds: 10.0,
            spec: spec.clone(),
            ops,
            timestamp: 0.0,
            stores: None,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Best throughput reachable when cores are handed out in `step`-core
/// units: every unit goes to the operator currently furthest behind, which
/// maximizes the minimum of `theta_i * R_i` on the lattice. Sequential
/// operators stop receiving units at one core.
pub fn lattice_optimum(terms: &[LpTerm], cores: f64, step: f64) -> f64 {
    let mut theta = vec![0.0f64; terms.len()];
    let mut left = cores;
    loop {
        let open = terms
            .iter()
            .enumerate()
            .filter(|(i, t)| !(t.sequential && theta[*i] + step / t.weight > 1.0 + 1e-12))
            .min_by(|(i, a), (j, b)| (theta[*i] * a.rate).total_cmp(&(theta[*j] * b.rate)));
        if left < step - 1e-12 {
            break;
        }
        let Some((i, t)) = open else { break };
        let slowest = terms
            .iter()
            .enumerate()
            .map(|(j, u)| theta[j] * u.rate)
            .fold(f64::INFINITY, f64::min);
        if theta[i] * t.rate > slowest {
            break;
        }
        theta[i] += step / t.weight;
        left -= step;
    }
    terms
        .iter()
        .zip(&theta)
        .map(|(t, th)| th * t.rate)
        .fold(f64::INFINITY, f64::min)
}

/// Random core-allocation instances with 1 to 6 operators on 8 to 64 cores,
/// where the 0.01-core lattice loses at most 6 * 0.01 / 8 of the optimum.
pub fn random_lp(seed: u64) -> (Vec<LpTerm>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let terms = (0..n)
        .map(|i| LpTerm {
            name: format!("op{i}"),
            rate: 10f64.powf(rng.random_range(-0.5..2.0)),
            sequential: rng.random_bool(0.25),
            weight: [1.0, 1.0, 1.0, 2.0, 3.0][rng.random_range(0..5)],
        })
        .collect();
    (terms, rng.random_range(8.0..64.0))
}
