//! Clocks and CPU-cost execution.
//!
//! Operator work is charged against a per-thread *active* clock: wall time
//! minus the time the thread spent inside [`blocking`] sections (channel
//! waits, core-slot waits, bandwidth throttling). Everything the runtime does
//! that may park a thread goes through [`blocking`], so the active clock only
//! advances while a worker is doing, or simulating, work.

use std::cell::Cell;
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Costs below this many microseconds are busy-spun even under the virtual
/// model; sleeping cannot resolve them.
pub const SPIN_THRESHOLD_US: f64 = 50.0;

fn epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

thread_local! {
    static BLOCKED_NS: Cell<u64> = const { Cell::new(0) };
}

/// Monotonic process-wide nanoseconds.
#[inline]
pub fn now_ns() -> u64 {
    epoch().elapsed().as_nanos() as u64
}

/// Nanoseconds this thread has spent outside [`blocking`] sections, on an
/// arbitrary per-thread origin. Only differences are meaningful.
#[inline]
pub fn active_ns() -> u64 {
    now_ns() - BLOCKED_NS.with(Cell::get)
}

/// Runs `f`, excluding its duration from the calling thread's active clock.
pub fn blocking<T>(f: impl FnOnce() -> T) -> T {
    let start = now_ns();
    let out = f();
    let spent = now_ns() - start;
    BLOCKED_NS.with(|b| b.set(b.get() + spent));
    out
}

/// CPU time consumed by the calling thread.
pub fn thread_cpu_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec and the clock id is a
    // constant supported on every Linux kernel we target.
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

/// Asks the kernel to wake this thread as close to its sleep deadline as it
/// can. Without it, short sleeps overshoot by tens of microseconds.
pub fn tighten_timer_slack() {
    #[cfg(target_os = "linux")]
    // SAFETY: PR_SET_TIMERSLACK only touches the calling thread's scheduling
    // parameters.
    unsafe {
        libc::prctl(libc::PR_SET_TIMERSLACK, 1 as libc::c_ulong, 0, 0, 0);
    }
}

/// Spins until the calling thread has consumed `ns` of CPU time.
pub fn spin_cpu(ns: u64) {
    if ns == 0 {
        return;
    }
    let start = thread_cpu_ns();
    while thread_cpu_ns() - start < ns {
        std::hint::spin_loop();
    }
}

/// How per-element CPU cost is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum CpuModel {
    /// Real busy-spin on the host's cores.
    Spin,
    /// A pool of `cores` simulated cores. Work of at least
    /// [`SPIN_THRESHOLD_US`] occupies core slots for its duration instead of
    /// spinning, which lets a small host reproduce many-core scaling.
    Virtual { cores: u32 },
}

impl Default for CpuModel {
    fn default() -> Self {
        CpuModel::Virtual { cores: 16 }
    }
}

impl std::str::FromStr for CpuModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spin" => Ok(CpuModel::Spin),
            "virtual" => Ok(CpuModel::Virtual { cores: 16 }),
            other => other
                .strip_prefix("virtual:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &u32| n > 0)
                .map(|cores| CpuModel::Virtual { cores })
                .ok_or_else(|| format!("unknown cpu model `{other}` (spin | virtual[:cores])")),
        }
    }
}

/// Executes synthetic CPU cost according to a [`CpuModel`].
#[derive(Debug)]
pub struct CpuPool {
    model: CpuModel,
    free: Mutex<u32>,
    released: Condvar,
}

impl CpuPool {
    pub fn new(model: CpuModel) -> Self {
        let free = match model {
            CpuModel::Virtual { cores } => cores.max(1),
            CpuModel::Spin => 0,
        };
        CpuPool {
            model,
            free: Mutex::new(free),
            released: Condvar::new(),
        }
    }

    pub fn model(&self) -> CpuModel {
        self.model
    }

    /// Performs `cost_us` microseconds of work split across `width` parallel
    /// strands, returning once all strands are done. The calling thread's
    /// active clock advances by the duration of one strand.
    pub fn burn(&self, cost_us: f64, width: u32) {
        if cost_us <= 0.0 {
            return;
        }
        let width = width.max(1);
        let total_ns = (cost_us * 1000.0) as u64;
        match self.model {
            CpuModel::Virtual { cores } if cost_us >= SPIN_THRESHOLD_US => {
                let slots = width.min(cores.max(1));
                self.acquire(slots);
                std::thread::sleep(Duration::from_nanos(total_ns / slots as u64));
                self.release(slots);
            }
            _ if width == 1 => spin_cpu(total_ns),
            _ => {
                let share = total_ns / width as u64;
                std::thread::scope(|s| {
                    for _ in 1..width {
                        s.spawn(move || spin_cpu(share));
                    }
                    spin_cpu(share);
                });
            }
        }
    }

    fn acquire(&self, slots: u32) {
        let mut free = self.free.lock().unwrap();
        if *free >= slots {
            *free -= slots;
            return;
        }
        drop(free);
        blocking(|| {
            let mut free = self.free.lock().unwrap();
            while *free < slots {
                free = self.released.wait(free).unwrap();
            }
            *free -= slots;
        });
    }

    fn release(&self, slots: u32) {
        *self.free.lock().unwrap() += slots;
        self.released.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn blocking_time_is_excluded_from_active_clock() {
        let a0 = active_ns();
        blocking(|| std::thread::sleep(Duration::from_millis(20)));
        let a1 = active_ns();
        assert!(a1 - a0 < 5_000_000, "active advanced {} ns", a1 - a0);
    }

    #[test]
    fn virtual_burn_advances_active_clock() {
        let pool = CpuPool::new(CpuModel::Virtual { cores: 2 });
        let a0 = active_ns();
        pool.burn(5000.0, 1);
        let spent = active_ns() - a0;
        assert!(spent >= 5_000_000, "{spent}");
    }

    #[test]
    fn virtual_pool_limits_concurrency() {
        let pool = Arc::new(CpuPool::new(CpuModel::Virtual { cores: 1 }));
        let t0 = Instant::now();
        let handles: Vec<_> = (0..3)
            .map(|_| {
                let p = pool.clone();
                std::thread::spawn(move || p.burn(10_000.0, 1))
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(t0.elapsed() >= Duration::from_millis(29));
    }

    #[test]
    fn wide_work_finishes_sooner() {
        let pool = CpuPool::new(CpuModel::Virtual { cores: 4 });
        let t0 = Instant::now();
        pool.burn(40_000.0, 4);
        let e = t0.elapsed();
        assert!(
            e >= Duration::from_millis(10) && e < Duration::from_millis(30),
            "{e:?}"
        );
    }

    #[test]
    fn spin_consumes_thread_cpu() {
        let c0 = thread_cpu_ns();
        CpuPool::new(CpuModel::Spin).burn(2000.0, 1);
        assert!(thread_cpu_ns() - c0 >= 2_000_000);
    }

    #[test]
    fn model_parses() {
        assert_eq!("spin".parse::<CpuModel>(), Ok(CpuModel::Spin));
        assert_eq!(
            "virtual:8".parse::<CpuModel>(),
            Ok(CpuModel::Virtual { cores: 8 })
        );
        assert!("virtual:0".parse::<CpuModel>().is_err());
    }
}
