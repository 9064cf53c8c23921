//! Tuning experiments and synthetic workloads.

pub mod disk;
pub mod presets;
pub mod report;
pub mod tune;

pub use disk::{
    cache_estimates, disk_sweep, subsample_errors, CachePoint, SweepConfig, SweepPoint,
};
pub use presets::preset;
pub use report::{summarize, write_csv, write_report, Summary};
pub use tune::{
    iterative_tune, measure, naive_configuration, random_walk, Measurement, StepRecord, TuneConfig,
    TuneHistory,
};
