//! Simulated file stores.
//!
//! A [`FileStore`] only holds file metadata; reads hand back byte counts and
//! block according to a token-bucket bandwidth limit, so a 150 GB dataset
//! costs a few kilobytes of memory.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering::Relaxed};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::engine::cpu::{blocking, now_ns};
use crate::error::{Error, Result};
use crate::tracer;

pub const MIB: u64 = 1024 * 1024;

/// Fraction of peak bandwidth that defines the knee of a [`BandwidthCurve`].
pub const KNEE_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SizeDistribution {
    Constant {
        bytes: u64,
    },
    /// Sizes are `exp(N(mu, sigma))` bytes.
    LogNormal {
        mu: f64,
        sigma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub id: usize,
    pub size: u64,
}

/// Token bucket holding byte credits. Requests may drive the balance
/// negative; the requester then waits until the debt is repaid, which keeps
/// the served byte stream within `capacity + rate * window`.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<BucketState>,
}

#[derive(Debug)]
struct BucketState {
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    /// A full bucket refilling at `rate` bytes/s with one second of burst.
    pub fn new(rate: u64) -> Self {
        Self::with_capacity(rate, rate)
    }

    pub fn with_capacity(rate: u64, capacity: u64) -> Self {
        TokenBucket {
            rate: rate.max(1) as f64,
            capacity: capacity as f64,
            state: Mutex::new(BucketState {
                tokens: capacity as f64,
                last: Instant::now(),
            }),
        }
    }

    pub fn rate(&self) -> u64 {
        self.rate as u64
    }

    /// Drains the bucket, as if the burst had just been spent.
    pub fn drain(&self) {
        let mut s = self.state.lock().unwrap();
        s.tokens = 0.0;
        s.last = Instant::now();
    }

    pub fn tokens(&self) -> f64 {
        let mut s = self.state.lock().unwrap();
        self.refill(&mut s);
        s.tokens
    }

    fn refill(&self, s: &mut BucketState) {
        let now = Instant::now();
        let dt = now.duration_since(s.last).as_secs_f64();
        s.tokens = (s.tokens + dt * self.rate).min(self.capacity);
        s.last = now;
    }

    /// Debits `bytes` and returns how long the caller must wait before the
    /// bytes count as served.
    pub fn reserve(&self, bytes: u64) -> Duration {
        let mut s = self.state.lock().unwrap();
        self.refill(&mut s);
        s.tokens -= bytes as f64;
        if s.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-s.tokens / self.rate)
        }
    }
}

/// A set of files with an optional bandwidth limit.
#[derive(Debug)]
pub struct FileStore {
    files: Vec<FileEntry>,
    bucket: Option<TokenBucket>,
    per_reader: Option<u64>,
    served: AtomicU64,
    serve_log: Option<Mutex<Vec<(u64, u64)>>>,
}

impl FileStore {
    pub fn from_files(files: Vec<FileEntry>) -> Self {
        FileStore {
            files,
            bucket: None,
            per_reader: None,
            served: AtomicU64::new(0),
            serve_log: None,
        }
    }

    /// Builds `file_count` files with sizes drawn from `dist`. Non-positive
    /// draws are redrawn.
    pub fn create(file_count: usize, dist: SizeDistribution, seed: u64) -> Result<Self> {
        if file_count == 0 {
            return Err(Error::InvalidArgument("file_count must be >= 1".into()));
        }
        let files = match dist {
            SizeDistribution::Constant { bytes } => {
                if bytes == 0 {
                    return Err(Error::InvalidArgument(
                        "constant file size must be > 0".into(),
                    ));
                }
                (0..file_count)
                    .map(|id| FileEntry { id, size: bytes })
                    .collect()
            }
            SizeDistribution::LogNormal { mu, sigma } => {
                let d = LogNormal::new(mu, sigma)
                    .map_err(|e| Error::InvalidArgument(format!("lognormal: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..file_count)
                    .map(|id| loop {
                        let size = d.sample(&mut rng).round();
                        if size >= 1.0 && size.is_finite() {
                            break FileEntry {
                                id,
                                size: size as u64,
                            };
                        }
                    })
                    .collect()
            }
        };
        Ok(Self::from_files(files))
    }

    /// Limits the global read bandwidth to `bytes_per_sec`; `None` removes
    /// the limit.
    pub fn with_bandwidth(mut self, bytes_per_sec: Option<u64>) -> Self {
        self.bucket = bytes_per_sec.map(TokenBucket::new);
        self
    }

    pub fn with_bucket(mut self, bucket: TokenBucket) -> Self {
        self.bucket = Some(bucket);
        self
    }

    /// Caps each individual read at `bytes_per_sec`.
    pub fn with_per_reader_cap(mut self, bytes_per_sec: Option<u64>) -> Self {
        self.per_reader = bytes_per_sec;
        self
    }

    /// Records `(serve time ns, bytes)` for every read.
    pub fn with_serve_log(mut self) -> Self {
        self.serve_log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn file_count(&self) -> usize {
        self.files.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.size).sum()
    }

    pub fn file_size(&self, id: usize) -> Option<u64> {
        self.files.get(id).map(|f| f.size)
    }

    pub fn bandwidth(&self) -> Option<u64> {
        self.bucket.as_ref().map(TokenBucket::rate)
    }

    pub fn per_reader_cap(&self) -> Option<u64> {
        self.per_reader
    }

    pub fn is_unlimited(&self) -> bool {
        self.bucket.is_none() && self.per_reader.is_none()
    }

    pub fn bucket(&self) -> Option<&TokenBucket> {
        self.bucket.as_ref()
    }

    /// Bytes served since creation.
    pub fn bytes_served(&self) -> u64 {
        self.served.load(Relaxed)
    }

    pub fn serve_log(&self) -> Vec<(u64, u64)> {
        self.serve_log
            .as_ref()
            .map(|l| l.lock().unwrap().clone())
            .unwrap_or_default()
    }

    /// Reads `nbytes` from file `file`, blocking until the bandwidth limit
    /// allows it. The bytes are attributed to the operator running on the
    /// calling thread.
    pub fn read(&self, file: usize, nbytes: u64) -> Result<u64> {
        if file >= self.files.len() {
            return Err(Error::UnknownFile {
                store: String::new(),
                file,
            });
        }
        let start = now_ns();
        let mut wait = self
            .bucket
            .as_ref()
            .map_or(Duration::ZERO, |b| b.reserve(nbytes));
        if let Some(cap) = self.per_reader {
            wait = wait.max(Duration::from_secs_f64(nbytes as f64 / cap.max(1) as f64));
        }
        if let Some(log) = &self.serve_log {
            log.lock()
                .unwrap()
                .push((start + wait.as_nanos() as u64, nbytes));
        }
        if !wait.is_zero() {
            blocking(|| std::thread::sleep(wait));
        }
        self.served.fetch_add(nbytes, Relaxed);
        tracer::record_read(nbytes);
        Ok(nbytes)
    }

    pub fn describe(&self) -> StoreDescription {
        StoreDescription {
            files: self.files.clone(),
            bandwidth: self.bandwidth(),
            per_reader_bandwidth: self.per_reader,
        }
    }
}

/// Serialized form of a store: `{"files":[{"id","size"}], "bandwidth": int|null}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDescription {
    pub files: Vec<FileEntry>,
    pub bandwidth: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_reader_bandwidth: Option<u64>,
}

impl StoreDescription {
    pub fn into_store(self) -> Result<FileStore> {
        if self.files.is_empty() {
            return Err(Error::InvalidArgument("store has no files".into()));
        }
        for (i, f) in self.files.iter().enumerate() {
            if f.id != i {
                return Err(Error::InvalidArgument(format!(
                    "file ids must be 0..n in order, found {} at position {i}",
                    f.id
                )));
            }
            if f.size == 0 {
                return Err(Error::InvalidArgument(format!("file {i} has size 0")));
            }
        }
        Ok(FileStore::from_files(self.files)
            .with_bandwidth(self.bandwidth)
            .with_per_reader_cap(self.per_reader_bandwidth))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            context: format!("{}: store at `{}`", path.display(), e.path()),
            message: e.inner().to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Names of the stores every registry starts with.
pub const BUILTIN_STORES: [&str; 4] = ["imagenet_synth", "coco_synth", "wmt_synth", "chain_synth"];

/// Builds one of the built-in synthetic stores.
pub fn builtin_store(name: &str) -> Option<FileStore> {
    let store = match name {
        // 1024 record files of 144 MiB each, ~1340 records of 110 KiB apiece.
        "imagenet_synth" => {
            FileStore::create(1024, SizeDistribution::Constant { bytes: 144 * MIB }, 0)
        }
        "coco_synth" => FileStore::create(
            160,
            SizeDistribution::LogNormal {
                mu: (128.0 * MIB as f64).ln(),
                sigma: 0.1,
            },
            7,
        ),
        "wmt_synth" => FileStore::create(
            64,
            SizeDistribution::LogNormal {
                mu: (16.0 * MIB as f64).ln(),
                sigma: 0.2,
            },
            11,
        ),
        "chain_synth" => FileStore::create(16, SizeDistribution::Constant { bytes: MIB }, 0),
        _ => return None,
    };
    Some(store.expect("built-in store parameters are valid"))
}

/// Stores addressable by id from a pipeline's sources.
#[derive(Debug, Clone, Default)]
pub struct StoreRegistry {
    stores: BTreeMap<String, Arc<FileStore>>,
}

impl StoreRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        for name in BUILTIN_STORES {
            r.insert(name, builtin_store(name).expect("builtin"));
        }
        r
    }

    pub fn insert(&mut self, id: impl Into<String>, store: FileStore) -> Arc<FileStore> {
        let store = Arc::new(store);
        self.stores.insert(id.into(), store.clone());
        store
    }

    pub fn get(&self, id: &str) -> Result<Arc<FileStore>> {
        self.stores
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownStore(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.stores.keys().map(String::as_str)
    }

    /// Replaces every store with a copy limited to `bytes_per_sec`.
    pub fn set_bandwidth(&mut self, bytes_per_sec: Option<u64>) {
        for store in self.stores.values_mut() {
            let fresh = FileStore::from_files(store.files.clone())
                .with_bandwidth(bytes_per_sec)
                .with_per_reader_cap(store.per_reader);
            *store = Arc::new(fresh);
        }
    }
}

/// Measured parallelism → bandwidth samples with a piecewise-linear fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthCurve {
    /// `(parallelism, bytes/sec)` sorted by parallelism.
    pub samples: Vec<(u32, f64)>,
    pub knee: u32,
}

impl BandwidthCurve {
    pub fn from_samples(mut samples: Vec<(u32, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument(
                "bandwidth curve needs samples".into(),
            ));
        }
        samples.sort_by_key(|s| s.0);
        samples.dedup_by_key(|s| s.0);
        let mut curve = BandwidthCurve { samples, knee: 1 };
        curve.knee = curve.knee_at(KNEE_FRACTION);
        Ok(curve)
    }

    /// A curve describing a fixed bandwidth independent of parallelism.
    pub fn flat(bytes_per_sec: f64) -> Self {
        BandwidthCurve {
            samples: vec![(1, bytes_per_sec)],
            knee: 1,
        }
    }

    pub fn max_bandwidth(&self) -> f64 {
        self.samples.iter().map(|s| s.1).fold(0.0, f64::max)
    }

    /// Linear interpolation between samples, clamped to the end samples.
    pub fn fitted(&self, p: f64) -> f64 {
        let s = &self.samples;
        if p <= s[0].0 as f64 {
            return s[0].1;
        }
        for w in s.windows(2) {
            let (p0, b0) = (w[0].0 as f64, w[0].1);
            let (p1, b1) = (w[1].0 as f64, w[1].1);
            if p <= p1 {
                return b0 + (b1 - b0) * (p - p0) / (p1 - p0);
            }
        }
        s[s.len() - 1].1
    }

    /// Smallest integer parallelism whose fitted bandwidth reaches
    /// `fraction` of the peak.
    pub fn knee_at(&self, fraction: f64) -> u32 {
        let target = fraction * self.max_bandwidth();
        let first = self.samples[0].0.max(1);
        let last = self.samples[self.samples.len() - 1].0.max(first);
        (first..=last)
            .find(|&p| self.fitted(p as f64) >= target)
            .unwrap_or(last)
    }
}

/// Reads issued by every reader during one bandwidth trial.
const TRIAL_CHUNKS: u64 = 8;

/// Measures aggregate read bandwidth at each parallelism level. An
/// unthrottled store has no meaningful curve, so it reports its single-reader
/// speed at every level.
pub fn bench_bandwidth(store: &FileStore, levels: &[u32]) -> Result<BandwidthCurve> {
    if levels.is_empty() {
        return Err(Error::InvalidArgument("no parallelism levels".into()));
    }
    if store.is_unlimited() {
        let rate = trial(store, 1);
        return BandwidthCurve::from_samples(levels.iter().map(|&p| (p, rate)).collect());
    }
    let samples = levels
        .iter()
        .map(|&p| (p, trial(store, p.max(1))))
        .collect();
    BandwidthCurve::from_samples(samples)
}

fn trial(store: &FileStore, readers: u32) -> f64 {
    if let Some(b) = store.bucket() {
        b.drain();
    }
    let n = store.file_count();
    let start = Instant::now();
    std::thread::scope(|s| {
        for r in 0..readers as usize {
            s.spawn(move || {
                let file = r % n;
                let chunk = MIB.min(store.files[file].size);
                for _ in 0..TRIAL_CHUNKS {
                    store.read(file, chunk).expect("file exists");
                }
            });
        }
    });
    let elapsed = start.elapsed().as_secs_f64().max(1e-9);
    let total: u64 = (0..readers as usize)
        .map(|r| MIB.min(store.files[r % n].size) * TRIAL_CHUNKS)
        .sum();
    total as f64 / elapsed
}

/// Scales the total size of `n` sampled files up to a population of `m`.
pub fn estimate_source_size(sampled_sizes: &[u64], population: usize) -> Result<f64> {
    let n = sampled_sizes.len();
    if n == 0 || population < n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= sampled ({n}) <= population ({population})"
        )));
    }
    let sum: f64 = sampled_sizes.iter().map(|&s| s as f64).sum();
    Ok(sum * population as f64 / n as f64)
}

/// Draws `n` distinct file indices out of `m`, deterministically per seed.
pub fn sample_files(m: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..m).collect();
    let n = n.min(m);
    for i in 0..n {
        let j = rng.random_range(i..m);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_store_total() {
        let s =
            FileStore::create(1024, SizeDistribution::Constant { bytes: 144 * MIB }, 0).unwrap();
        assert_eq!(s.total_bytes(), 154_618_822_656);
        let one = FileStore::create(1, SizeDistribution::Constant { bytes: 1 }, 0).unwrap();
        assert_eq!(one.total_bytes(), 1);
    }

    #[test]
    fn lognormal_store_is_seeded() {
        let d = SizeDistribution::LogNormal {
            mu: 10.0,
            sigma: 1.0,
        };
        let a = FileStore::create(100, d, 3).unwrap();
        let b = FileStore::create(100, d, 3).unwrap();
        let c = FileStore::create(100, d, 4).unwrap();
        assert_eq!(a.files(), b.files());
        assert_ne!(a.files(), c.files());
        assert!(a.files().iter().all(|f| f.size > 0));
    }

    #[test]
    fn tiny_lognormal_sizes_are_redrawn() {
        let d = SizeDistribution::LogNormal {
            mu: -1.0,
            sigma: 1.0,
        };
        let s = FileStore::create(50, d, 1).unwrap();
        assert!(s.files().iter().all(|f| f.size >= 1));
    }

    #[test]
    fn zero_files_rejected() {
        assert!(FileStore::create(0, SizeDistribution::Constant { bytes: 1 }, 0).is_err());
    }

    #[test]
    fn unlimited_read_is_immediate() {
        let s = FileStore::create(1, SizeDistribution::Constant { bytes: MIB }, 0).unwrap();
        let t = Instant::now();
        assert_eq!(s.read(0, MIB).unwrap(), MIB);
        assert!(t.elapsed() < Duration::from_millis(5));
        assert!(matches!(
            s.read(3, 1),
            Err(Error::UnknownFile { file: 3, .. })
        ));
    }

    #[test]
    fn limited_read_takes_at_least_bytes_over_rate() {
        let bucket = TokenBucket::new(100_000_000);
        bucket.drain();
        let s = FileStore::create(1, SizeDistribution::Constant { bytes: 144 * MIB }, 0)
            .unwrap()
            .with_bucket(bucket);
        let t = Instant::now();
        s.read(0, 14_420_000).unwrap();
        assert!(
            t.elapsed() >= Duration::from_millis(144),
            "{:?}",
            t.elapsed()
        );
    }

    #[test]
    fn curve_interpolates_samples_exactly() {
        let c = BandwidthCurve::from_samples(vec![(4, 400.0), (1, 100.0), (2, 200.0), (8, 400.0)])
            .unwrap();
        assert_eq!(c.samples[0], (1, 100.0));
        for &(p, b) in &c.samples {
            assert_eq!(c.fitted(p as f64), b);
        }
        assert_eq!(c.fitted(3.0), 300.0);
        assert_eq!(c.fitted(0.5), 100.0);
        assert_eq!(c.fitted(100.0), 400.0);
        assert_eq!(c.knee, 4);
    }

    #[test]
    fn single_level_knee_is_one() {
        let c = BandwidthCurve::from_samples(vec![(1, 5.0)]).unwrap();
        assert_eq!(c.knee, 1);
        assert!(BandwidthCurve::from_samples(vec![]).is_err());
    }

    #[test]
    fn description_round_trip() {
        let s = FileStore::create(3, SizeDistribution::Constant { bytes: 10 }, 0)
            .unwrap()
            .with_bandwidth(Some(5));
        let d = s.describe();
        let json = serde_json::to_string(&d).unwrap();
        assert!(
            json.starts_with(r#"{"files":[{"id":0,"size":10}"#),
            "{json}"
        );
        let back: StoreDescription = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.into_store().unwrap().bandwidth(), Some(5));
    }

    #[test]
    fn subsample_of_uniform_sizes_is_exact() {
        let sizes = vec![144_000_000u64; 10];
        assert_eq!(estimate_source_size(&sizes, 1000).unwrap(), 144e9);
        assert!(estimate_source_size(&[], 10).is_err());
        assert!(estimate_source_size(&[1, 2], 1).is_err());
    }

    #[test]
    fn sample_files_are_distinct() {
        let s = sample_files(100, 30, 9);
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 30);
        assert_eq!(s, sample_files(100, 30, 9));
    }
}
