//! Experiment orchestration: configs, seeded training runs with on-disk
//! results, resumable parallel sweeps, and the reports built from them.

mod config;
mod report;
mod sweep;
mod train;

pub use config::{ConfigFile, InitScheme, LrRule, Profile, Recipe, RunConfig};
pub use report::{
    analyze, analyze_matrix, random_sphere_report, scaling_report, write_csv, AnalysisReport, AnalyzeOptions,
    BaselineReport, ScalingRow, MIN_SCALING_POINTS,
};
pub use sweep::{
    expand, read_sweep_csv, sweep, worker_count, write_sweep_csv, SweepConfig, SweepGrid, SweepRow, SCHEMA_VERSION,
    SWEEP_CSV, THREADS_ENV,
};
pub use train::{
    evaluate, geometry_metrics, init_model, load_failure, load_result, read_history, run, run_dir, stream_key, train,
    FailureRecord, GeometryMetrics, RunResult, TrainOutput, CONFIG_FILE, FAILURE_FILE, HISTORY_FILE, MODEL_FILE,
    RESULT_FILE,
};
