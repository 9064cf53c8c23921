//! Iterator implementations for every operator kind.

use std::collections::VecDeque;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{
    bounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender, TryRecvError, TrySendError,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cpu::{blocking, CpuPool};
use super::spec::{MapParams, Operator, OperatorNode, RepeatCount, SourceParams};
use super::{BoxIter, CacheState, Cancel, DatasetIter, Element, EngineCtx};
use crate::error::{Error, Result};
use crate::storage::FileStore;
use crate::tracer::{self, OpStats};

/// How often blocked waits re-check cancellation.
const POLL: Duration = Duration::from_millis(10);

type Item = Result<Element>;

pub(super) fn build(
    ctx: &Arc<EngineCtx>,
    node: &OperatorNode,
    scope: &Arc<Cancel>,
) -> Result<BoxIter> {
    let child = |i: usize| -> Result<&str> {
        node.children
            .get(i)
            .map(String::as_str)
            .ok_or_else(|| Error::InvalidArgument(format!("`{}` is missing a child", node.name)))
    };
    Ok(match &node.op {
        Operator::Source(p) => {
            let files = (0..ctx.stores.get(&p.store_id)?.file_count()).collect();
            Box::new(SourceIter::new(ctx, p, files)?)
        }
        Operator::Interleave(p) => {
            let streams = interleave_streams(ctx, node)?;
            let scope = scope.child();
            match node.parallelism {
                Some(workers) => Box::new(ParallelInterleave::new(
                    ctx,
                    node,
                    streams,
                    workers.max(1),
                    p.cpu_cost_per_element,
                    scope,
                )),
                None => Box::new(Interleave {
                    ctx: ctx.clone(),
                    open: VecDeque::new(),
                    pending: streams.into(),
                    cycle: p.cycle_length.max(1) as usize,
                    cost: p.cpu_cost_per_element,
                    scope,
                }),
            }
        }
        Operator::Map(p) => {
            let scope = scope.child();
            let inner = ctx.build(child(0)?, &scope)?;
            match node.parallelism {
                Some(workers) => {
                    let workers = workers.max(1);
                    Box::new(ParallelMap::new(
                        ctx,
                        &node.name,
                        inner,
                        p.clone(),
                        workers,
                        2 * workers as usize,
                        scope,
                    ))
                }
                None => Box::new(Map {
                    cpu: ctx.cpu.clone(),
                    child: inner,
                    params: p.clone(),
                    carry: 0.0,
                    pending: 0,
                    last: None,
                }),
            }
        }
        Operator::Prefetch(p) => {
            let scope = scope.child();
            let inner = ctx.build(child(0)?, &scope)?;
            Box::new(ParallelMap::new(
                ctx,
                &node.name,
                inner,
                MapParams::default(),
                1,
                p.buffer_size.max(1) as usize,
                scope,
            ))
        }
        Operator::Filter(p) => Box::new(Filter {
            cpu: ctx.cpu.clone(),
            child: ctx.build(child(0)?, scope)?,
            keep: p.keep_probability,
            cost: p.cpu_cost_per_element,
            rng: ChaCha8Rng::seed_from_u64(ctx.seed_for(&node.name)),
        }),
        Operator::Shuffle(p) => Box::new(Shuffle {
            child: ctx.build(child(0)?, scope)?,
            buf: Vec::with_capacity(p.buffer_size.min(1 << 16) as usize),
            size: p.buffer_size.max(1) as usize,
            exhausted: false,
            rng: ChaCha8Rng::seed_from_u64(ctx.seed_for(&node.name)),
        }),
        Operator::Batch(p) => Box::new(Batch {
            child: ctx.build(child(0)?, scope)?,
            size: p.batch_size.max(1),
        }),
        Operator::Repeat(p) => {
            let scope = scope.child();
            Box::new(Repeat {
                ctx: ctx.clone(),
                child_name: child(0)?.to_string(),
                child: Some(ctx.build(child(0)?, &scope)?),
                count: p.count,
                epochs: 0,
                produced: false,
                scope,
            })
        }
        Operator::Take(p) => {
            let scope = scope.child();
            Box::new(Take {
                child: Some(ctx.build(child(0)?, &scope)?),
                remaining: p.count,
                scope,
            })
        }
        Operator::Cache(_) => Cache::open(ctx, &node.name, child(0)?, scope)?,
    })
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    match m.try_lock() {
        Ok(g) => g,
        Err(_) => blocking(|| m.lock().unwrap_or_else(|e| e.into_inner())),
    }
}

fn recv(rx: &Receiver<Item>, scope: &Cancel) -> Result<Option<Element>> {
    match rx.try_recv() {
        Ok(item) => return item.map(Some),
        Err(TryRecvError::Disconnected) => return Ok(None),
        Err(TryRecvError::Empty) => {}
    }
    blocking(|| loop {
        if scope.is_cancelled() {
            return Err(Error::Closed);
        }
        match rx.recv_timeout(POLL) {
            Ok(item) => return item.map(Some),
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return Ok(None),
        }
    })
}

/// Sends `item`, returning false when the receiver is gone or the scope was
/// cancelled.
fn send(tx: &Sender<Item>, item: Item, scope: &Cancel) -> bool {
    let item = match tx.try_send(item) {
        Ok(()) => return true,
        Err(TrySendError::Disconnected(_)) => return false,
        Err(TrySendError::Full(item)) => item,
    };
    blocking(|| {
        let mut item = item;
        loop {
            if scope.is_cancelled() {
                return false;
            }
            match tx.send_timeout(item, POLL) {
                Ok(()) => return true,
                Err(SendTimeoutError::Timeout(back)) => item = back,
                Err(SendTimeoutError::Disconnected(_)) => return false,
            }
        }
    })
}

fn join_all(workers: &mut Vec<JoinHandle<()>>) {
    for w in workers.drain(..) {
        let _ = blocking(|| w.join());
    }
}

/// Reads the records of a list of files from a store.
pub(super) struct SourceIter {
    ctx: Arc<EngineCtx>,
    store: Arc<FileStore>,
    params: SourceParams,
    files: Vec<usize>,
    next_file: usize,
    cursor: Option<RecordCursor>,
}

struct RecordCursor {
    file: usize,
    size: u64,
    emitted: u64,
    offset: u64,
}

impl SourceIter {
    fn new(ctx: &Arc<EngineCtx>, params: &SourceParams, files: Vec<usize>) -> Result<Self> {
        Ok(SourceIter {
            ctx: ctx.clone(),
            store: ctx.stores.get(&params.store_id)?,
            params: params.clone(),
            files,
            next_file: 0,
            cursor: None,
        })
    }

    fn next_record(&self, c: &RecordCursor) -> Option<u64> {
        if let Some(b) = self.params.bytes_per_record {
            return (c.offset < c.size).then(|| b.min(c.size - c.offset));
        }
        let r = self.params.records_per_file.unwrap_or(1);
        (c.emitted < r).then(|| {
            let start = c.size as u128 * c.emitted as u128 / r as u128;
            let end = c.size as u128 * (c.emitted + 1) as u128 / r as u128;
            (end - start) as u64
        })
    }
}

impl DatasetIter for SourceIter {
    fn next(&mut self) -> Result<Option<Element>> {
        loop {
            if self.cursor.is_none() {
                let Some(&file) = self.files.get(self.next_file) else {
                    return Ok(None);
                };
                self.next_file += 1;
                let size = self
                    .store
                    .file_size(file)
                    .ok_or_else(|| Error::UnknownFile {
                        store: self.params.store_id.clone(),
                        file,
                    })?;
                if let Some(t) = &self.ctx.tracer {
                    t.observe_file(&self.params.store_id, self.store.file_count(), file, size);
                }
                self.cursor = Some(RecordCursor {
                    file,
                    size,
                    emitted: 0,
                    offset: 0,
                });
            }
            let c = self.cursor.as_ref().expect("cursor set above");
            let Some(bytes) = self.next_record(c) else {
                self.cursor = None;
                continue;
            };
            let file = c.file;
            self.store.read(file, bytes).map_err(|e| match e {
                Error::UnknownFile { file, .. } => Error::UnknownFile {
                    store: self.params.store_id.clone(),
                    file,
                },
                other => other,
            })?;
            let c = self.cursor.as_mut().expect("cursor set above");
            c.offset += bytes;
            c.emitted += 1;
            self.ctx.cpu.burn(self.params.cpu_cost_per_element, 1);
            return Ok(Some(Element {
                payload_bytes: bytes,
                provenance: file,
            }));
        }
    }

    fn close(&mut self) {
        self.next_file = self.files.len();
        self.cursor = None;
    }
}

/// One input of an Interleave: a single file of a source child, or a whole
/// non-source child.
#[derive(Debug, Clone)]
enum Stream {
    File { source: String, file: usize },
    Child(String),
}

fn interleave_streams(ctx: &EngineCtx, node: &OperatorNode) -> Result<Vec<Stream>> {
    let mut out = Vec::new();
    for c in &node.children {
        match &ctx.node(c)?.op {
            Operator::Source(p) => {
                let n = ctx.stores.get(&p.store_id)?.file_count();
                out.extend((0..n).map(|file| Stream::File {
                    source: c.clone(),
                    file,
                }));
            }
            _ => out.push(Stream::Child(c.clone())),
        }
    }
    Ok(out)
}

fn open_stream(ctx: &Arc<EngineCtx>, stream: &Stream, scope: &Arc<Cancel>) -> Result<BoxIter> {
    match stream {
        Stream::File { source, file } => {
            let Operator::Source(p) = &ctx.node(source)?.op else {
                unreachable!("file streams come from source children")
            };
            let it = SourceIter::new(ctx, p, vec![*file])?;
            Ok(ctx.traced(source, Box::new(it)))
        }
        Stream::Child(name) => ctx.build(name, scope),
    }
}

/// Round-robin over up to `cycle` open streams, one element at a time.
struct Interleave {
    ctx: Arc<EngineCtx>,
    open: VecDeque<BoxIter>,
    pending: VecDeque<Stream>,
    cycle: usize,
    cost: f64,
    scope: Arc<Cancel>,
}

impl DatasetIter for Interleave {
    fn next(&mut self) -> Result<Option<Element>> {
        loop {
            while self.open.len() < self.cycle {
                let Some(s) = self.pending.pop_front() else {
                    break;
                };
                self.open
                    .push_back(open_stream(&self.ctx, &s, &self.scope)?);
            }
            let Some(mut stream) = self.open.pop_front() else {
                return Ok(None);
            };
            match stream.next()? {
                Some(e) => {
                    self.open.push_back(stream);
                    self.ctx.cpu.burn(self.cost, 1);
                    return Ok(Some(e));
                }
                None => stream.close(),
            }
        }
    }

    fn close(&mut self) {
        self.scope.cancel();
        for mut s in self.open.drain(..) {
            s.close();
        }
        self.pending.clear();
    }
}

/// Interleave whose workers each drain one claimed stream at a time.
struct ParallelInterleave {
    rx: Option<Receiver<Item>>,
    workers: Vec<JoinHandle<()>>,
    scope: Arc<Cancel>,
}

impl ParallelInterleave {
    fn new(
        ctx: &Arc<EngineCtx>,
        node: &OperatorNode,
        streams: Vec<Stream>,
        workers: u32,
        cost: f64,
        scope: Arc<Cancel>,
    ) -> Self {
        let (tx, rx) = bounded::<Item>(2 * workers as usize);
        let queue = Arc::new(Mutex::new(VecDeque::from(streams)));
        let stats = ctx.stats(&node.name);
        let handles = (0..workers)
            .map(|i| {
                let (ctx2, tx, queue, scope, stats) = (
                    ctx.clone(),
                    tx.clone(),
                    queue.clone(),
                    scope.clone(),
                    stats.clone(),
                );
                ctx.spawn_worker(format!("{}#{i}", node.name), move || {
                    with_frame(stats.as_ref(), || {
                        interleave_worker(&ctx2, &queue, &tx, &scope, cost)
                    })
                })
            })
            .collect();
        ParallelInterleave {
            rx: Some(rx),
            workers: handles,
            scope,
        }
    }
}

fn with_frame(stats: Option<&Arc<OpStats>>, f: impl FnOnce()) {
    if let Some(s) = stats {
        tracer::begin_worker(s);
    }
    f();
    if stats.is_some() {
        tracer::end_worker();
    }
}

fn interleave_worker(
    ctx: &Arc<EngineCtx>,
    queue: &Mutex<VecDeque<Stream>>,
    tx: &Sender<Item>,
    scope: &Arc<Cancel>,
    cost: f64,
) {
    loop {
        if scope.is_cancelled() {
            return;
        }
        let Some(stream) = lock(queue).pop_front() else {
            return;
        };
        let mut it = match open_stream(ctx, &stream, scope) {
            Ok(it) => it,
            Err(e) => {
                send(tx, Err(e), scope);
                return;
            }
        };
        loop {
            match it.next() {
                Ok(Some(e)) => {
                    ctx.cpu.burn(cost, 1);
                    if !send(tx, Ok(e), scope) {
                        it.close();
                        return;
                    }
                }
                Ok(None) => break,
                Err(Error::Closed) => {
                    it.close();
                    return;
                }
                Err(e) => {
                    it.close();
                    send(tx, Err(e), scope);
                    return;
                }
            }
        }
        it.close();
    }
}

impl DatasetIter for ParallelInterleave {
    fn next(&mut self) -> Result<Option<Element>> {
        match &self.rx {
            Some(rx) => recv(rx, &self.scope),
            None => Ok(None),
        }
    }

    fn close(&mut self) {
        self.scope.cancel();
        self.rx = None;
        join_all(&mut self.workers);
    }
}

fn map_output(e: Element, byte_ratio: f64) -> Element {
    Element {
        payload_bytes: (e.payload_bytes as f64 * byte_ratio).round() as u64,
        provenance: e.provenance,
    }
}

/// Advances the fractional output counter and returns how many outputs the
/// current input yields.
fn take_outputs(carry: &mut f64, ratio: f64) -> u64 {
    *carry += ratio;
    let k = carry.floor();
    *carry -= k;
    k as u64
}

/// Map executed inline on the caller's thread.
struct Map {
    cpu: Arc<CpuPool>,
    child: BoxIter,
    params: MapParams,
    carry: f64,
    pending: u64,
    last: Option<Element>,
}

impl DatasetIter for Map {
    fn next(&mut self) -> Result<Option<Element>> {
        loop {
            if self.pending > 0 {
                self.pending -= 1;
                return Ok(self.last);
            }
            let Some(e) = self.child.next()? else {
                return Ok(None);
            };
            self.cpu.burn(
                self.params.cpu_cost_per_element,
                self.params.udf_internal_parallelism,
            );
            self.pending = take_outputs(&mut self.carry, self.params.input_output_ratio);
            self.last = Some(map_output(e, self.params.byte_ratio));
        }
    }

    fn close(&mut self) {
        self.child.close();
        self.pending = 0;
    }
}

struct MapShared {
    child: BoxIter,
    carry: f64,
}

/// Map (or prefetch) whose work runs on `workers` threads sharing the child.
struct ParallelMap {
    rx: Option<Receiver<Item>>,
    workers: Vec<JoinHandle<()>>,
    shared: Arc<Mutex<MapShared>>,
    scope: Arc<Cancel>,
}

impl ParallelMap {
    fn new(
        ctx: &Arc<EngineCtx>,
        name: &str,
        child: BoxIter,
        params: MapParams,
        workers: u32,
        capacity: usize,
        scope: Arc<Cancel>,
    ) -> Self {
        let (tx, rx) = bounded::<Item>(capacity);
        let shared = Arc::new(Mutex::new(MapShared { child, carry: 0.0 }));
        let stats = ctx.stats(name);
        let handles = (0..workers)
            .map(|i| {
                let (cpu, tx, shared, scope, stats, params) = (
                    ctx.cpu.clone(),
                    tx.clone(),
                    shared.clone(),
                    scope.clone(),
                    stats.clone(),
                    params.clone(),
                );
                ctx.spawn_worker(format!("{name}#{i}"), move || {
                    with_frame(stats.as_ref(), || {
                        map_worker(&cpu, &shared, &tx, &scope, &params)
                    })
                })
            })
            .collect();
        ParallelMap {
            rx: Some(rx),
            workers: handles,
            shared,
            scope,
        }
    }
}

fn map_worker(
    cpu: &CpuPool,
    shared: &Mutex<MapShared>,
    tx: &Sender<Item>,
    scope: &Cancel,
    params: &MapParams,
) {
    loop {
        if scope.is_cancelled() {
            return;
        }
        let pulled = {
            let mut g = lock(shared);
            match g.child.next() {
                Ok(Some(e)) => Ok(Some((
                    e,
                    take_outputs(&mut g.carry, params.input_output_ratio),
                ))),
                Ok(None) => Ok(None),
                Err(e) => Err(e),
            }
        };
        match pulled {
            Ok(Some((e, k))) => {
                cpu.burn(params.cpu_cost_per_element, params.udf_internal_parallelism);
                let out = map_output(e, params.byte_ratio);
                for _ in 0..k {
                    if !send(tx, Ok(out), scope) {
                        return;
                    }
                }
            }
            Ok(None) | Err(Error::Closed) => return,
            Err(e) => {
                send(tx, Err(e), scope);
                return;
            }
        }
    }
}

impl DatasetIter for ParallelMap {
    fn next(&mut self) -> Result<Option<Element>> {
        match &self.rx {
            Some(rx) => recv(rx, &self.scope),
            None => Ok(None),
        }
    }

    fn close(&mut self) {
        if self.rx.is_none() && self.workers.is_empty() {
            return;
        }
        self.scope.cancel();
        self.rx = None;
        join_all(&mut self.workers);
        lock(&self.shared).child.close();
    }
}

struct Filter {
    cpu: Arc<CpuPool>,
    child: BoxIter,
    keep: f64,
    cost: f64,
    rng: ChaCha8Rng,
}

impl DatasetIter for Filter {
    fn next(&mut self) -> Result<Option<Element>> {
        while let Some(e) = self.child.next()? {
            self.cpu.burn(self.cost, 1);
            if self.rng.random_bool(self.keep) {
                return Ok(Some(e));
            }
        }
        Ok(None)
    }

    fn close(&mut self) {
        self.child.close();
    }
}

/// Fixed-size shuffle buffer: each output is a uniformly chosen buffered
/// element, replaced by the next input.
struct Shuffle {
    child: BoxIter,
    buf: Vec<Element>,
    size: usize,
    exhausted: bool,
    rng: ChaCha8Rng,
}

impl DatasetIter for Shuffle {
    fn next(&mut self) -> Result<Option<Element>> {
        while !self.exhausted && self.buf.len() < self.size {
            match self.child.next()? {
                Some(e) => self.buf.push(e),
                None => self.exhausted = true,
            }
        }
        if self.buf.is_empty() {
            return Ok(None);
        }
        let i = self.rng.random_range(0..self.buf.len());
        Ok(Some(self.buf.swap_remove(i)))
    }

    fn close(&mut self) {
        self.child.close();
        self.buf.clear();
        self.exhausted = true;
    }
}

struct Batch {
    child: BoxIter,
    size: u64,
}

impl DatasetIter for Batch {
    fn next(&mut self) -> Result<Option<Element>> {
        let mut out: Option<Element> = None;
        for _ in 0..self.size {
            let Some(e) = self.child.next()? else { break };
            match &mut out {
                Some(b) => b.payload_bytes += e.payload_bytes,
                None => out = Some(e),
            }
        }
        Ok(out)
    }

    fn close(&mut self) {
        self.child.close();
    }
}

struct Repeat {
    ctx: Arc<EngineCtx>,
    child_name: String,
    child: Option<BoxIter>,
    count: RepeatCount,
    epochs: u64,
    produced: bool,
    scope: Arc<Cancel>,
}

impl DatasetIter for Repeat {
    fn next(&mut self) -> Result<Option<Element>> {
        loop {
            let Some(child) = self.child.as_mut() else {
                return Ok(None);
            };
            if let Some(e) = child.next()? {
                self.produced = true;
                return Ok(Some(e));
            }
            child.close();
            self.child = None;
            self.epochs += 1;
            let more = match self.count {
                RepeatCount::Finite(k) => self.epochs < k,
                RepeatCount::Infinite => self.produced,
            };
            if !more {
                return Ok(None);
            }
            self.produced = false;
            self.child = Some(self.ctx.build(&self.child_name, &self.scope)?);
        }
    }

    fn close(&mut self) {
        self.scope.cancel();
        if let Some(mut c) = self.child.take() {
            c.close();
        }
    }
}

struct Take {
    child: Option<BoxIter>,
    remaining: u64,
    scope: Arc<Cancel>,
}

impl DatasetIter for Take {
    fn next(&mut self) -> Result<Option<Element>> {
        if self.remaining == 0 {
            self.close();
            return Ok(None);
        }
        let Some(child) = self.child.as_mut() else {
            return Ok(None);
        };
        let out = child.next()?;
        if out.is_some() {
            self.remaining -= 1;
        }
        Ok(out)
    }

    fn close(&mut self) {
        self.scope.cancel();
        if let Some(mut c) = self.child.take() {
            c.close();
        }
    }
}

/// Stores its child's output on the first complete pass and serves later
/// openings from memory.
struct Cache {
    state: Arc<CacheState>,
    child: Option<BoxIter>,
    probe: Option<usize>,
    replay_pos: usize,
    ended: bool,
    scope: Arc<Cancel>,
}

impl Cache {
    fn open(ctx: &Arc<EngineCtx>, name: &str, child: &str, scope: &Arc<Cancel>) -> Result<BoxIter> {
        let state = ctx.cache_state(name);
        let scope = scope.child();
        let child = if state.complete.load(Ordering::Acquire) {
            None
        } else {
            state.elements.lock().unwrap().clear();
            Some(ctx.build(child, &scope)?)
        };
        Ok(Box::new(Cache {
            state,
            child,
            probe: ctx.options.cache_probe,
            replay_pos: 0,
            ended: false,
            scope,
        }))
    }

    fn replay(&mut self) -> Option<Element> {
        if self.ended {
            return None;
        }
        let elements = self.state.elements.lock().unwrap();
        if elements.is_empty() {
            return None;
        }
        if self.replay_pos >= elements.len() {
            if self.probe.is_none() {
                return None;
            }
            self.replay_pos = 0;
        }
        let e = elements[self.replay_pos];
        self.replay_pos += 1;
        Some(e)
    }

    fn finish_fill(&mut self) {
        self.state.complete.store(true, Ordering::Release);
        if let Some(mut c) = self.child.take() {
            c.close();
        }
    }
}

impl DatasetIter for Cache {
    fn next(&mut self) -> Result<Option<Element>> {
        let Some(child) = self.child.as_mut() else {
            return Ok(self.replay());
        };
        match child.next()? {
            Some(e) => {
                let filled = {
                    let mut elements = self.state.elements.lock().unwrap();
                    elements.push(e);
                    elements.len()
                };
                if self.probe.is_some_and(|n| filled >= n) {
                    self.finish_fill();
                    self.replay_pos = filled;
                }
                Ok(Some(e))
            }
            None => {
                self.finish_fill();
                self.ended = true;
                Ok(None)
            }
        }
    }

    fn close(&mut self) {
        self.scope.cancel();
        if let Some(mut c) = self.child.take() {
            c.close();
        }
    }
}
