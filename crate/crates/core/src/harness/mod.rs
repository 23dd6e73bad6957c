//! Experiment orchestration behind the `singd` CLI: run configuration,
//! seeded training with CSV metrics, memory accounting, verification
//! suites and the congruence benchmark.

mod bench;
mod config;
mod memory;
pub mod oracle;
mod train;
mod verify;

pub use bench::{bench, BenchRow, BENCH_BATCH};
pub use config::{ConfigFile, ModelSpec, RunConfig, Schedule, TaskSpec, SEED_ENV};
pub use memory::{memory_report, state_scalars, LayerMemory, MemoryReport};
pub use train::{
    model_shapes, run_training, write_csv, write_csv_file, TrainOutcome, TrainRecord, CSV_COLUMNS,
    CSV_VERSION_LINE,
};
pub use verify::{
    closure_errors, ikfac_special_case_gap, low_precision_config, low_precision_run,
    quadratic_convergence, quantizer_mismatches, quantizer_samples, random_spd, structure_classes,
    theorem1_error, trajectory, verify, LowPrecisionRun, PropertyCheck, Suite,
};
