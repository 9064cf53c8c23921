//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input (bad or missing
//! files, invalid specs), 3 runtime failure. Data goes to standard output or
//! to files; diagnostics go to standard error.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bench::{self, presets, report, SweepConfig, TuneConfig};
use crate::engine::spec::{OpKind, PipelineSpec};
use crate::engine::{instantiate, BenchConfig, CpuModel, EngineOptions, StableOptions};
use crate::error::{Error, Result};
use crate::optimizer::{self, DiskBudget, LiveOptions, ResourceBudget, TuningPlan};
use crate::rates::RateModel;
use crate::rewriter::{self, Insertion};
use crate::storage::{BandwidthCurve, StoreDescription, StoreRegistry};
use crate::tracer::{TraceSnapshot, Tracer};
use config::Config;

const GB: f64 = 1e9;
const MB: f64 = 1e6;

#[derive(Parser, Debug)]
#[command(
    name = "pipetune",
    version,
    about = "Trace, model and tune data pipelines"
)]
struct Cli {
    /// `key = value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra store, as `ID=PATH` to a store description JSON.
    #[arg(long = "store", global = true, value_name = "ID=PATH")]
    stores: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default, Clone)]
struct BudgetArgs {
    /// CPU cores available to the pipeline (default 16).
    #[arg(long)]
    cores: Option<f64>,
    /// Memory available for caching, in GB (default 16).
    #[arg(long = "memory-gb")]
    memory_gb: Option<f64>,
    /// Throttles every store and bounds the plan's disk throughput.
    #[arg(long = "bandwidth-mbps")]
    bandwidth_mbps: Option<f64>,
    /// JSON bandwidth curve used as the disk budget.
    #[arg(long = "bandwidth-curve")]
    bandwidth_curve: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone)]
struct EngineArgs {
    /// `spin`, `virtual` or `virtual:N`.
    #[arg(long = "cpu-model")]
    cpu_model: Option<String>,
    /// Seed for random operators.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default, Clone)]
struct TraceArgs {
    /// Relative change between successive estimates that counts as stable.
    #[arg(long)]
    threshold: Option<f64>,
    /// Never report stable before this many seconds.
    #[arg(long = "min-seconds")]
    min_seconds: Option<f64>,
    /// Give up and report the latest estimate after this many seconds.
    #[arg(long = "max-seconds")]
    max_seconds: Option<f64>,
    /// Seconds between successive estimates.
    #[arg(long)]
    interval: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a preset pipeline spec.
    Gen {
        /// Preset name (default resnet_shape).
        #[arg(long)]
        preset: Option<String>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Check a spec and list every violation.
    Validate {
        /// Spec JSON file.
        spec: PathBuf,
    },
    /// Run a spec and report its throughput.
    Run {
        /// Spec JSON file.
        spec: PathBuf,
        /// Run for this many seconds.
        #[arg(long)]
        seconds: Option<f64>,
        /// Run for this many root elements instead.
        #[arg(long)]
        elements: Option<u64>,
        /// Fraction of the budget excluded from the rate.
        #[arg(long)]
        warmup: Option<f64>,
        /// Throttles every store.
        #[arg(long = "bandwidth-mbps")]
        bandwidth_mbps: Option<f64>,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Trace a spec until its throughput settles and write the snapshot.
    Trace {
        /// Spec JSON file.
        spec: PathBuf,
        /// Snapshot path (default stdout).
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Throttles every store.
        #[arg(long = "bandwidth-mbps")]
        bandwidth_mbps: Option<f64>,
        #[command(flatten)]
        trace: TraceArgs,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Print the rate model of a snapshot.
    Analyze {
        /// Snapshot JSON file.
        snapshot: PathBuf,
        /// Human-readable table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Plan against a budget and write the plan and rewritten spec.
    Optimize {
        /// Snapshot JSON file.
        snapshot: PathBuf,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Plan path (default stdout).
        #[arg(long = "plan-out")]
        plan_out: Option<PathBuf>,
        /// Path for the rewritten spec.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Edit a spec.
    Rewrite {
        /// Spec JSON file.
        spec: PathBuf,
        /// `NODE=K`.
        #[arg(long = "set")]
        set: Vec<String>,
        #[arg(long = "cache-after")]
        cache_after: Vec<String>,
        /// `NODE:BUFFER`.
        #[arg(long = "prefetch-after")]
        prefetch_after: Vec<String>,
        /// Plan JSON to apply.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Output path (default stdout).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Tuning and estimation experiments.
    Bench {
        kind: BenchKind,
        /// Preset pipeline to tune.
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Tuning steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Measurement window of each step.
        #[arg(long = "trace-seconds")]
        trace_seconds: Option<f64>,
        /// Directory for reports (default bench_out).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineArgs,
    },
    /// Trace, plan twice, rewrite and report the measured speedup.
    EndToEnd {
        /// Spec JSON file; defaults to the preset.
        spec: Option<PathBuf>,
        /// Preset used when no spec is given.
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        budget: BudgetArgs,
        /// Length of each before/after measurement.
        #[arg(long)]
        seconds: Option<f64>,
        #[command(flatten)]
        trace: TraceArgs,
        /// Directory for the optimized spec and plan.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        engine: EngineArgs,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BenchKind {
    Tune,
    Walk,
    Disk,
    Cache,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Closed | Error::EmptyTrace | Error::Unknown(_) | Error::Csv(_) => 3,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            3
        }
    }
}

enum Failure {
    /// Classified by [`exit_code`].
    Input(Error),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e)
    }
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

struct Context {
    config: Config,
    stores: StoreRegistry,
}

fn dispatch(cli: Cli) -> std::result::Result<(), Failure> {
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut stores = StoreRegistry::with_builtins();
    for s in &cli.stores {
        let (id, path) = s
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--store expects ID=PATH, got `{s}`")))?;
        stores.insert(id, StoreDescription::load(path)?.into_store()?);
    }
    let ctx = Context { config, stores };
    match cli.command {
        Command::Gen { preset, out } => {
            let name = ctx
                .config
                .resolve(preset, "preset", "resnet_shape".to_string())?;
            let spec = presets::preset(&name)?;
            emit(&spec.to_json(), out.as_deref())
        }
        Command::Validate { spec } => {
            let spec = PipelineSpec::load(&spec)?;
            spec.validated()?;
            println!("ok: {} nodes, root `{}`", spec.nodes.len(), spec.root);
            Ok(())
        }
        Command::Run {
            spec,
            seconds,
            elements,
            warmup,
            bandwidth_mbps,
            engine,
        } => cmd_run(
            &ctx,
            &spec,
            seconds,
            elements,
            warmup,
            bandwidth_mbps,
            &engine,
        ),
        Command::Trace {
            spec,
            out,
            bandwidth_mbps,
            trace,
            engine,
        } => cmd_trace(&ctx, &spec, out.as_deref(), bandwidth_mbps, &trace, &engine),
        Command::Analyze { snapshot, table } => {
            let snap = TraceSnapshot::load(&snapshot)?;
            let model = RateModel::from_snapshot(&snap, Some(&ctx.stores))?;
            if table {
                print!("{}", model.to_table());
            } else {
                println!("{}", model.to_json());
            }
            Ok(())
        }
        Command::Optimize {
            snapshot,
            budget,
            plan_out,
            out,
        } => {
            let snap = TraceSnapshot::load(&snapshot)?;
            let budget = resolve_budget(&ctx.config, &budget)?;
            let model = RateModel::from_snapshot(&snap, Some(&ctx.stores))?;
            let plan = optimizer::plan(&model, &budget)?;
            let spec = rewriter::apply_plan(&snap.spec, &plan)?;
            for w in &plan.warnings {
                eprintln!("warning: {w}");
            }
            match plan_out {
                Some(p) => write_file(&p, &plan.to_json())?,
                None => println!("{}", plan.to_json()),
            }
            if let Some(o) = out {
                write_file(&o, &spec.to_json())?;
            }
            Ok(())
        }
        Command::Rewrite {
            spec,
            set,
            cache_after,
            prefetch_after,
            plan,
            out,
        } => {
            let mut spec = PipelineSpec::load(&spec)?;
            if let Some(p) = plan {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                spec = rewriter::apply_plan(&spec, &TuningPlan::from_json(&text)?)?;
            }
            for s in &set {
                let (node, k) = split_pair(s, '=', "--set")?;
                spec = rewriter::set_parallelism(&spec, node, parse_num(k, "--set")?)?;
            }
            for s in &prefetch_after {
                let (node, b) = split_pair(s, ':', "--prefetch-after")?;
                spec = rewriter::insert_after(
                    &spec,
                    node,
                    Insertion::Prefetch(parse_num(b, "--prefetch-after")?),
                )?;
            }
            for node in &cache_after {
                spec = rewriter::insert_after(&spec, node, Insertion::Cache)?;
            }
            spec.validated()?;
            emit(&spec.to_json(), out.as_deref())
        }
        Command::Bench {
            kind,
            preset,
            budget,
            steps,
            trace_seconds,
            out,
            engine,
        } => cmd_bench(
            &ctx,
            kind,
            preset,
            &budget,
            steps,
            trace_seconds,
            out,
            &engine,
        ),
        Command::EndToEnd {
            spec,
            preset,
            budget,
            seconds,
            trace,
            out,
            engine,
        } => {
            let spec = match (spec, ctx.config.resolve_opt(preset, "preset")?) {
                (Some(p), _) => PipelineSpec::load(&p)?,
                (None, Some(name)) => presets::preset(&name)?,
                (None, None) => {
                    return Err(Error::InvalidArgument(
                        "end-to-end needs a spec file or --preset".into(),
                    )
                    .into())
                }
            };
            let budget = resolve_budget(&ctx.config, &budget)?;
            let mut stores = ctx.stores.clone();
            if let DiskBudget::Bandwidth(b) = budget.disk {
                stores.set_bandwidth(Some(b as u64));
            }
            let opts = EndToEndOptions {
                measure_seconds: ctx.config.resolve(seconds, "seconds", 10.0)?,
                live: LiveOptions {
                    trace: resolve_trace(&ctx.config, &trace, LiveOptions::default().trace)?,
                    engine: resolve_engine(&ctx.config, &engine, Some(&budget))?,
                    ..LiveOptions::default()
                },
            };
            let report = runtime(end_to_end(&spec, &stores, &budget, &opts))?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(Error::io(&dir, e)))?;
                write_file(&dir.join("optimized.json"), &report.spec.to_json())?;
                write_file(&dir.join("plan.json"), &report.plan.to_json())?;
            }
            eprintln!(
                "before {:.3} mb/s, after {:.3} mb/s, speedup {:.2}x",
                report.before, report.after, report.speedup
            );
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(Error::from)?
            );
            Ok(())
        }
    }
}

fn bandwidth_bytes(mbps: Option<f64>) -> Result<Option<u64>> {
    match mbps {
        Some(m) if !(m > 0.0) => Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {m}"
        ))),
        Some(m) => Ok(Some((m * MB).round() as u64)),
        None => Ok(None),
    }
}

fn split_pair<'a>(s: &'a str, sep: char, flag: &str) -> Result<(&'a str, &'a str)> {
    s.split_once(sep)
        .ok_or_else(|| Error::InvalidArgument(format!("{flag} expects NODE{sep}VALUE, got `{s}`")))
}

fn parse_num<T: std::str::FromStr>(s: &str, flag: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::InvalidArgument(format!("{flag}: `{s}` is not a valid number")))
}

fn emit(text: &str, out: Option<&Path>) -> std::result::Result<(), Failure> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> std::result::Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(Error::io(path, e)))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn resolve_engine(
    config: &Config,
    args: &EngineArgs,
    budget: Option<&ResourceBudget>,
) -> Result<EngineOptions> {
    let default_model = match budget {
        Some(b) => CpuModel::Virtual {
            cores: b.cores.ceil().max(1.0) as u32,
        },
        None => CpuModel::default(),
    };
    let cpu_model = match config.resolve_opt(args.cpu_model.clone(), "cpu-model")? {
        Some(s) => s.parse::<CpuModel>().map_err(Error::InvalidArgument)?,
        None => default_model,
    };
    Ok(EngineOptions {
        cpu_model,
        seed: config.resolve(args.seed, "seed", 0)?,
        cache_probe: None,
    })
}

fn resolve_trace(
    config: &Config,
    args: &TraceArgs,
    defaults: StableOptions,
) -> Result<StableOptions> {
    Ok(StableOptions {
        threshold: config.resolve(args.threshold, "threshold", defaults.threshold)?,
        min_seconds: config.resolve(args.min_seconds, "min-seconds", defaults.min_seconds)?,
        max_seconds: config.resolve(args.max_seconds, "max-seconds", defaults.max_seconds)?,
        interval_seconds: config.resolve(args.interval, "interval", defaults.interval_seconds)?,
    })
}

fn resolve_budget(config: &Config, args: &BudgetArgs) -> Result<ResourceBudget> {
    let cores = config.resolve(args.cores, "cores", 16.0)?;
    let memory_gb = config.resolve(args.memory_gb, "memory-gb", 16.0)?;
    if !(memory_gb >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "memory must be non-negative, got {memory_gb}"
        )));
    }
    let curve: Option<PathBuf> =
        config.resolve_opt(args.bandwidth_curve.clone(), "bandwidth-curve")?;
    let disk = match (
        curve,
        config.resolve_opt(args.bandwidth_mbps, "bandwidth-mbps")?,
    ) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            let file: CurveFile =
                serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
                    context: path.display().to_string(),
                    message: e.to_string(),
                })?;
            DiskBudget::Curve(BandwidthCurve::from_samples(file.samples)?)
        }
        (None, Some(mbps)) => match bandwidth_bytes(Some(mbps))? {
            Some(b) => DiskBudget::Bandwidth(b as f64),
            None => DiskBudget::Unlimited,
        },
        (None, None) => DiskBudget::Unlimited,
    };
    ResourceBudget::new(cores, (memory_gb * GB).round() as u64, disk)
}

/// `{"samples": [[parallelism, bytes_per_sec], ...]}`; a stored
/// [`BandwidthCurve`] also parses, and its knee is recomputed.
#[derive(Deserialize)]
struct CurveFile {
    samples: Vec<(u32, f64)>,
}

#[derive(Serialize)]
struct RunReport {
    minibatches_per_sec: f64,
    elements_consumed: u64,
    wall_seconds: f64,
}

fn cmd_run(
    ctx: &Context,
    spec: &Path,
    seconds: Option<f64>,
    elements: Option<u64>,
    warmup: Option<f64>,
    bandwidth_mbps: Option<f64>,
    engine: &EngineArgs,
) -> std::result::Result<(), Failure> {
    let spec = PipelineSpec::load(spec)?;
    let mut stores = ctx.stores.clone();
    stores.set_bandwidth(bandwidth_bytes(
        ctx.config.resolve_opt(bandwidth_mbps, "bandwidth-mbps")?,
    )?);
    let warmup = ctx.config.resolve(warmup, "warmup", 0.2)?;
    let config = match ctx.config.resolve_opt(elements, "elements")? {
        Some(n) => BenchConfig::elements(n, warmup),
        None => BenchConfig::seconds(ctx.config.resolve(seconds, "seconds", 10.0)?, warmup),
    };
    let mut options = resolve_engine(&ctx.config, engine, None)?;
    if has_cache(&spec) {
        options.cache_probe = Some(LiveOptions::default().cache_probe);
    }
    let mut tree = instantiate(&spec, &stores, None, options)?;
    let r = runtime(tree.run_benchmark(&config))?;
    tree.close();
    eprintln!("{:.3} minibatches/s", r.minibatches_per_sec);
    println!(
        "{}",
        serde_json::to_string_pretty(&RunReport {
            minibatches_per_sec: r.minibatches_per_sec,
            elements_consumed: r.elements_consumed,
            wall_seconds: r.wall_seconds,
        })
        .map_err(Error::from)?
    );
    Ok(())
}

fn cmd_trace(
    ctx: &Context,
    spec: &Path,
    out: Option<&Path>,
    bandwidth_mbps: Option<f64>,
    trace: &TraceArgs,
    engine: &EngineArgs,
) -> std::result::Result<(), Failure> {
    let spec = PipelineSpec::load(spec)?;
    let mut stores = ctx.stores.clone();
    stores.set_bandwidth(bandwidth_bytes(
        ctx.config.resolve_opt(bandwidth_mbps, "bandwidth-mbps")?,
    )?);
    let opts = resolve_trace(&ctx.config, trace, StableOptions::default())?;
    let mut options = resolve_engine(&ctx.config, engine, None)?;
    if has_cache(&spec) {
        options.cache_probe = Some(LiveOptions::default().cache_probe);
    }
    let tracer = Tracer::new(&spec);
    let mut tree = instantiate(&spec, &stores, Some(tracer), options)?;
    let result = runtime(tree.trace_until_stable(&opts))?;
    tree.close();
    if !result.stable {
        eprintln!(
            "warning: throughput did not settle within {:.1} s",
            result.elapsed_seconds
        );
    }
    emit(&result.snapshot.to_json(), out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    ctx: &Context,
    kind: BenchKind,
    preset: Option<String>,
    budget: &BudgetArgs,
    steps: Option<usize>,
    trace_seconds: Option<f64>,
    out: Option<PathBuf>,
    engine: &EngineArgs,
) -> std::result::Result<(), Failure> {
    let c = &ctx.config;
    let name = c.resolve(preset, "preset", "resnet_shape".to_string())?;
    let spec = presets::preset(&name)?;
    let budget = resolve_budget(c, budget)?;
    let options = resolve_engine(c, engine, Some(&budget))?;
    let seed = options.seed;
    let out: PathBuf = c.resolve(out, "out", PathBuf::from("bench_out"))?;
    let trace_seconds = c.resolve(trace_seconds, "trace-seconds", 5.0)?;
    let mut stores = ctx.stores.clone();
    if let DiskBudget::Bandwidth(b) = budget.disk {
        if kind != BenchKind::Disk {
            stores.set_bandwidth(Some(b as u64));
        }
    }
    std::fs::create_dir_all(&out).map_err(|e| Failure::Runtime(Error::io(&out, e)))?;
    match kind {
        BenchKind::Tune | BenchKind::Walk => {
            let mut cfg = TuneConfig::new(budget, c.resolve(steps, "steps", 10)?);
            cfg.engine = options;
            cfg.trace_seconds = trace_seconds;
            let history = runtime(if kind == BenchKind::Tune {
                bench::iterative_tune(&spec, &stores, &cfg)
            } else {
                bench::random_walk(&spec, &stores, &cfg, seed)
            })?;
            let summary = runtime(report::write_report(&out, &[history], &[]))?;
            print!("{}", report::text_summary(&summary));
        }
        BenchKind::Disk => {
            let levels: Vec<Option<u64>> = match budget.disk {
                DiskBudget::Bandwidth(b) => vec![Some(b as u64)],
                _ => [50u64, 100, 150, 200, 250, 300]
                    .iter()
                    .map(|m| Some(m * MB as u64))
                    .chain([None])
                    .collect(),
            };
            let live = LiveOptions {
                engine: options,
                ..LiveOptions::default()
            };
            let unlimited = ResourceBudget::new(budget.cores, 0, DiskBudget::Unlimited)?;
            let naive = bench::naive_configuration(&spec)?;
            let (model, _) = runtime(optimizer::trace_model(&naive, &stores, &live))?;
            let plan = optimizer::plan_with_cache(&model, &unlimited, None)?;
            let mut tuned = naive;
            for (node, k) in &plan.integer_parallelism {
                tuned = rewriter::set_parallelism(&tuned, node, *k)?;
            }
            let cfg = SweepConfig {
                cores: budget.cores,
                warmup_seconds: 1.0,
                trace_seconds,
                engine: options,
            };
            let points = runtime(bench::disk_sweep(&tuned, &stores, &levels, &cfg))?;
            let path = out.join("disk.json");
            write_file(
                &path,
                &serde_json::to_string_pretty(&points).map_err(Error::from)?,
            )?;
            for p in &points {
                println!(
                    "{:>10} predicted {:8.3} measured {:8.3} error {:5.1}% binding {:?}",
                    p.bandwidth
                        .map_or("unlimited".into(), |b| format!("{:.0}MB/s", b / MB)),
                    p.predicted,
                    p.measured,
                    100.0 * p.relative_error(),
                    p.binding
                );
            }
        }
        BenchKind::Cache => {
            let checkpoints: Vec<f64> = [0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 30.0, 60.0]
                .into_iter()
                .filter(|&t| t <= trace_seconds)
                .chain([trace_seconds])
                .collect();
            let points = runtime(bench::cache_estimates(
                &spec,
                &stores,
                &checkpoints,
                options,
            ))?;
            let path = out.join("cache.json");
            write_file(
                &path,
                &serde_json::to_string_pretty(&points).map_err(Error::from)?,
            )?;
            for p in &points {
                let cols: Vec<String> = p
                    .estimates
                    .iter()
                    .map(|(n, e)| format!("{n}={e}"))
                    .collect();
                println!(
                    "{:6.2}s {:>8} source elements  {}",
                    p.trace_seconds,
                    p.source_elements,
                    cols.join(" ")
                );
            }
        }
    }
    Ok(())
}

fn has_cache(spec: &PipelineSpec) -> bool {
    spec.nodes.iter().any(|n| n.kind() == OpKind::Cache)
}

/// Settings for [`end_to_end`].
#[derive(Debug, Clone, Copy)]
pub struct EndToEndOptions {
    pub measure_seconds: f64,
    pub live: LiveOptions,
}

#[derive(Debug, Clone, Serialize)]
pub struct EndToEndReport {
    pub before: f64,
    pub after: f64,
    pub speedup: f64,
    pub plan: TuningPlan,
    pub passes: Vec<TuningPlan>,
    pub spec: PipelineSpec,
}

/// Measured throughput of `spec`; caches replay a short probe so the
/// measurement reflects their warm state.
pub fn measure_throughput(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    engine: EngineOptions,
    seconds: f64,
    cache_probe: usize,
) -> Result<f64> {
    let mut engine = engine;
    if has_cache(spec) {
        engine.cache_probe = Some(cache_probe);
    }
    let mut tree = instantiate(spec, stores, None, engine)?;
    let r = tree.run_benchmark(&BenchConfig::seconds(seconds, 0.2))?;
    tree.close();
    Ok(r.minibatches_per_sec)
}

/// Measures `spec`, optimizes it with live re-tracing, and measures again.
pub fn end_to_end(
    spec: &PipelineSpec,
    stores: &StoreRegistry,
    budget: &ResourceBudget,
    opts: &EndToEndOptions,
) -> Result<EndToEndReport> {
    let live = &opts.live;
    let before = measure_throughput(
        spec,
        stores,
        live.engine,
        opts.measure_seconds,
        live.cache_probe,
    )?;
    let outcome = optimizer::optimize_live(spec, stores, budget, live)?;
    let after = measure_throughput(
        &outcome.spec,
        stores,
        live.engine,
        opts.measure_seconds,
        live.cache_probe,
    )?;
    let mut merged = outcome.plans[0].clone();
    let last = outcome.final_plan();
    merged
        .integer_parallelism
        .extend(last.integer_parallelism.clone());
    merged.prefetch.extend(last.prefetch.clone());
    merged.predicted_x = last.predicted_x;
    merged.cpu_bound = last.cpu_bound;
    merged.disk_bound = last.disk_bound;
    merged.binding_constraint = last.binding_constraint.clone();
    merged.theta = last.theta.clone();
    merged.io_bytes_per_minibatch = last.io_bytes_per_minibatch;
    Ok(EndToEndReport {
        before,
        after,
        speedup: if before > 0.0 {
            after / before
        } else {
            f64::INFINITY
        },
        plan: merged,
        passes: outcome.plans,
        spec: outcome.spec,
    })
}
