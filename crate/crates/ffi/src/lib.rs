//! C ABI for pipetune.
//!
//! Objects cross the boundary as opaque handles (`PtSpec`, `PtStores`,
//! `PtTree`, `PtPlan`) created and freed through this API. Every fallible
//! call returns a [`PtStatus`]; on failure `pt_last_error` describes the
//! problem for the calling thread. Strings returned to the caller are owned
//! by the caller and released with `pt_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use pipetune::bench::presets;
use pipetune::engine::spec::PipelineSpec;
use pipetune::engine::{instantiate, BenchConfig, CpuModel, EngineOptions, IteratorTree};
use pipetune::optimizer::{self, DiskBudget, LpTerm, ResourceBudget, TuningPlan};
use pipetune::rates::RateModel;
use pipetune::rewriter::{self, Insertion};
use pipetune::storage::StoreRegistry;
use pipetune::tracer::{TraceSnapshot, Tracer};
use pipetune::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidSpec = 4,
    UnknownNode = 5,
    UnknownStore = 6,
    NotTunable = 7,
    InvalidParallelism = 8,
    RandomCache = 9,
    EmptyTrace = 10,
    Closed = 11,
    InvalidArgument = 12,
    Io = 13,
    /// The handle was created without tracing.
    NotTraced = 14,
    Internal = 15,
}

/// A pipeline program.
pub struct PtSpec(PipelineSpec);

/// A set of simulated file stores addressable by id.
pub struct PtStores(StoreRegistry);

/// A running iterator tree.
pub struct PtTree {
    tree: IteratorTree,
    tracer: Option<Arc<Tracer>>,
}

/// An optimizer plan.
pub struct PtPlan(TuningPlan);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(e: &Error) -> PtStatus {
    match e {
        Error::InvalidSpec(_) => PtStatus::InvalidSpec,
        Error::UnknownStore(_) | Error::UnknownFile { .. } => PtStatus::UnknownStore,
        Error::UnknownNode(_) => PtStatus::UnknownNode,
        Error::NotTunable(_) => PtStatus::NotTunable,
        Error::InvalidParallelism(_) => PtStatus::InvalidParallelism,
        Error::RandomCache(_) => PtStatus::RandomCache,
        Error::Closed => PtStatus::Closed,
        Error::EmptyTrace => PtStatus::EmptyTrace,
        Error::Io { .. } => PtStatus::Io,
        Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => PtStatus::Parse,
        Error::InvalidArgument(_) | Error::SignatureMismatch(_) => PtStatus::InvalidArgument,
        _ => PtStatus::Internal,
    }
}

/// Runs `f`, recording any error or panic for `pt_last_error`.
fn guard(f: impl FnOnce() -> Result<(), (PtStatus, String)>) -> PtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            PtStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            PtStatus::Internal
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (PtStatus, String)>;
}

impl<T> IntoFfi<T> for pipetune::Result<T> {
    fn ffi(self) -> Result<T, (PtStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (PtStatus, String) {
    (PtStatus::NullArgument, format!("`{what}` is null"))
}

/// # Safety
/// `s` is null or a valid NUL-terminated string.
unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, (PtStatus, String)> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        (
            PtStatus::InvalidUtf8,
            format!("`{what}` is not valid UTF-8"),
        )
    })
}

/// # Safety
/// `p` is null or points to a live value of `T`.
unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, (PtStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `p` is null or points to a live value of `T` not aliased elsewhere.
unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (PtStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

/// # Safety
/// `out` is null or valid for a pointer-sized write.
unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), (PtStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message describing the last failed call on this thread, or an empty
/// string. Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn pt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` is null or was returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a spec from JSON and validates it.
///
/// # Safety
/// `json` is a NUL-terminated string; `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn pt_spec_from_json(json: *const c_char, out: *mut *mut PtSpec) -> PtStatus {
    guard(|| {
        let spec = PipelineSpec::from_json(text(json, "json")?).ffi()?;
        spec.validated().ffi()?;
        emit(out, PtSpec(spec))
    })
}

/// Builds a preset pipeline such as `resnet_shape`.
///
/// # Safety
/// `name` is a NUL-terminated string; `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn pt_spec_preset(name: *const c_char, out: *mut *mut PtSpec) -> PtStatus {
    guard(|| {
        let spec = presets::preset(text(name, "name")?).ffi()?;
        emit(out, PtSpec(spec))
    })
}

/// The pipeline as JSON, or null if `spec` is null. Free with `pt_string_free`.
///
/// # Safety
/// `spec` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pt_spec_to_json(spec: *const PtSpec) -> *mut c_char {
    spec.as_ref()
        .map_or(ptr::null_mut(), |s| into_c_string(s.0.to_json()))
}

/// Sets the parallelism knob of `node` to `k`.
///
/// # Safety
/// `spec` is a live handle; `node` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pt_spec_set_parallelism(
    spec: *mut PtSpec,
    node: *const c_char,
    k: u32,
) -> PtStatus {
    guard(|| {
        let s = handle_mut(spec, "spec")?;
        s.0 = rewriter::set_parallelism(&s.0, text(node, "node")?, k).ffi()?;
        Ok(())
    })
}

/// Parallelism of `node`, written to `out`; 0 when the node has no knob.
///
/// # Safety
/// `spec` is a live handle; `node` is a NUL-terminated string; `out` is
/// valid for writing.
#[no_mangle]
pub unsafe extern "C" fn pt_spec_get_parallelism(
    spec: *const PtSpec,
    node: *const c_char,
    out: *mut u32,
) -> PtStatus {
    guard(|| {
        let s = handle(spec, "spec")?;
        let k = rewriter::get_parallelism(&s.0, text(node, "node")?).ffi()?;
        let out = handle_mut(out, "out")?;
        *out = k.unwrap_or(0);
        Ok(())
    })
}

/// Inserts a Cache after `node`.
///
/// # Safety
/// `spec` is a live handle; `node` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pt_spec_insert_cache(spec: *mut PtSpec, node: *const c_char) -> PtStatus {
    guard(|| {
        let s = handle_mut(spec, "spec")?;
        s.0 = rewriter::insert_after(&s.0, text(node, "node")?, Insertion::Cache).ffi()?;
        Ok(())
    })
}

/// Inserts a Prefetch of `buffer` elements after `node`.
///
/// # Safety
/// `spec` is a live handle; `node` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pt_spec_insert_prefetch(
    spec: *mut PtSpec,
    node: *const c_char,
    buffer: u64,
) -> PtStatus {
    guard(|| {
        let s = handle_mut(spec, "spec")?;
        s.0 =
            rewriter::insert_after(&s.0, text(node, "node")?, Insertion::Prefetch(buffer)).ffi()?;
        Ok(())
    })
}

/// # Safety
/// `spec` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pt_spec_free(spec: *mut PtSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// The built-in synthetic stores.
///
/// # Safety
/// `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn pt_stores_builtin(out: *mut *mut PtStores) -> PtStatus {
    guard(|| emit(out, PtStores(StoreRegistry::with_builtins())))
}

/// Throttles every store to `bytes_per_sec`; 0 removes the limit.
///
/// # Safety
/// `stores` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn pt_stores_set_bandwidth(
    stores: *mut PtStores,
    bytes_per_sec: u64,
) -> PtStatus {
    guard(|| {
        let s = handle_mut(stores, "stores")?;
        s.0.set_bandwidth((bytes_per_sec > 0).then_some(bytes_per_sec));
        Ok(())
    })
}

/// # Safety
/// `stores` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pt_stores_free(stores: *mut PtStores) {
    if !stores.is_null() {
        drop(Box::from_raw(stores));
    }
}

/// Instantiates `spec` over `stores` on `cores` simulated cores (0 means
/// real busy-spin), optionally with tracing.
///
/// # Safety
/// `spec` and `stores` are live handles; `out` is valid for writing a
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn pt_tree_open(
    spec: *const PtSpec,
    stores: *const PtStores,
    cores: u32,
    seed: u64,
    traced: bool,
    out: *mut *mut PtTree,
) -> PtStatus {
    guard(|| {
        let spec = &handle(spec, "spec")?.0;
        let stores = &handle(stores, "stores")?.0;
        let options = EngineOptions {
            cpu_model: if cores == 0 {
                CpuModel::Spin
            } else {
                CpuModel::Virtual { cores }
            },
            seed,
            cache_probe: None,
        };
        let tracer = traced.then(|| Tracer::new(spec));
        let tree = instantiate(spec, stores, tracer.clone(), options).ffi()?;
        emit(out, PtTree { tree, tracer })
    })
}

/// Pulls the next root element. At end of stream `has_element` is false.
///
/// # Safety
/// `tree` is a live handle; `payload_bytes` and `has_element` are valid for
/// writing.
#[no_mangle]
pub unsafe extern "C" fn pt_tree_next(
    tree: *mut PtTree,
    payload_bytes: *mut u64,
    has_element: *mut bool,
) -> PtStatus {
    guard(|| {
        let t = handle_mut(tree, "tree")?;
        let next = t.tree.next().ffi()?;
        *handle_mut(has_element, "has_element")? = next.is_some();
        *handle_mut(payload_bytes, "payload_bytes")? = next.map_or(0, |e| e.payload_bytes);
        Ok(())
    })
}

/// Pulls elements for `seconds` and writes the root rate after a 20% warmup.
///
/// # Safety
/// `tree` is a live handle; `rate` is valid for writing.
#[no_mangle]
pub unsafe extern "C" fn pt_tree_benchmark(
    tree: *mut PtTree,
    seconds: f64,
    rate: *mut f64,
) -> PtStatus {
    guard(|| {
        let t = handle_mut(tree, "tree")?;
        if !(seconds > 0.0) {
            return Err((PtStatus::InvalidArgument, "seconds must be positive".into()));
        }
        let r = t
            .tree
            .run_benchmark(&BenchConfig::seconds(seconds, 0.2))
            .ffi()?;
        *handle_mut(rate, "rate")? = r.minibatches_per_sec;
        Ok(())
    })
}

/// Snapshot of the tree's counters as JSON. Free with `pt_string_free`.
///
/// # Safety
/// `tree` is a live handle; `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn pt_tree_snapshot_json(
    tree: *const PtTree,
    out: *mut *mut c_char,
) -> PtStatus {
    guard(|| {
        let t = handle(tree, "tree")?;
        let tracer = t.tracer.as_ref().ok_or((
            PtStatus::NotTraced,
            "tree was opened without tracing".to_string(),
        ))?;
        let snap = tracer.snapshot(false).ffi()?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = into_c_string(snap.to_json());
        Ok(())
    })
}

/// Stops the tree's workers. Further `pt_tree_next` calls fail with
/// `Closed`.
///
/// # Safety
/// `tree` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pt_tree_close(tree: *mut PtTree) {
    if let Some(t) = tree.as_mut() {
        t.tree.close();
    }
}

/// Closes and releases the tree.
///
/// # Safety
/// `tree` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pt_tree_free(tree: *mut PtTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Plans from a snapshot against `cores`, `memory_bytes` and a fixed disk
/// bandwidth (0 means unlimited). `stores` may be null; when given, its
/// store sizes replace the snapshot's estimates.
///
/// # Safety
/// `snapshot_json` is a NUL-terminated string; `stores` is null or a live
/// handle; `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn pt_plan_from_snapshot(
    snapshot_json: *const c_char,
    stores: *const PtStores,
    cores: f64,
    memory_bytes: u64,
    bandwidth_bytes_per_sec: f64,
    out: *mut *mut PtPlan,
) -> PtStatus {
    guard(|| {
        let snap = TraceSnapshot::from_json(text(snapshot_json, "snapshot_json")?).ffi()?;
        let stores = stores.as_ref().map(|s| &s.0);
        let model = RateModel::from_snapshot(&snap, stores).ffi()?;
        let disk = if bandwidth_bytes_per_sec > 0.0 {
            DiskBudget::Bandwidth(bandwidth_bytes_per_sec)
        } else {
            DiskBudget::Unlimited
        };
        let budget = ResourceBudget::new(cores, memory_bytes, disk).ffi()?;
        emit(out, PtPlan(optimizer::plan(&model, &budget).ffi()?))
    })
}

/// Predicted root throughput; infinity when nothing bounds it, NaN for a
/// null handle.
///
/// # Safety
/// `plan` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pt_plan_predicted(plan: *const PtPlan) -> f64 {
    plan.as_ref().map_or(f64::NAN, |p| p.0.predicted())
}

/// The plan as JSON, or null if `plan` is null. Free with `pt_string_free`.
///
/// # Safety
/// `plan` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pt_plan_to_json(plan: *const PtPlan) -> *mut c_char {
    plan.as_ref()
        .map_or(ptr::null_mut(), |p| into_c_string(p.0.to_json()))
}

/// Applies `plan` to a copy of `spec`.
///
/// # Safety
/// `plan` and `spec` are live handles; `out` is valid for writing a pointer.
#[no_mangle]
pub unsafe extern "C" fn pt_plan_apply(
    plan: *const PtPlan,
    spec: *const PtSpec,
    out: *mut *mut PtSpec,
) -> PtStatus {
    guard(|| {
        let plan = &handle(plan, "plan")?.0;
        let spec = &handle(spec, "spec")?.0;
        emit(out, PtSpec(rewriter::apply_plan(spec, plan).ffi()?))
    })
}

/// # Safety
/// `plan` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pt_plan_free(plan: *mut PtPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Splits `cores` among `n` operators with per-core rates `rates`, capping
/// operators flagged in `sequential` at one core. Writes each operator's
/// cores to `theta` and the reachable throughput to `throughput`.
///
/// # Safety
/// `rates`, `sequential` and `theta` point to `n` elements; `throughput` is
/// valid for writing.
#[no_mangle]
pub unsafe extern "C" fn pt_solve_cpu_lp(
    rates: *const f64,
    sequential: *const bool,
    n: usize,
    cores: f64,
    theta: *mut f64,
    throughput: *mut f64,
) -> PtStatus {
    guard(|| {
        if rates.is_null() || sequential.is_null() || theta.is_null() {
            return Err(null("rates, sequential or theta"));
        }
        let rates = std::slice::from_raw_parts(rates, n);
        let sequential = std::slice::from_raw_parts(sequential, n);
        let terms: Vec<LpTerm> = (0..n)
            .map(|i| LpTerm::new(i.to_string(), rates[i], sequential[i]))
            .collect();
        let solution = optimizer::solve_cpu_lp(&terms, cores).ffi()?;
        let theta = std::slice::from_raw_parts_mut(theta, n);
        for (i, t) in theta.iter_mut().enumerate() {
            *t = solution.theta[&i.to_string()];
        }
        *handle_mut(throughput, "throughput")? = solution.throughput;
        Ok(())
    })
}
