//! Problem ingestion, built-in benchmarks, solver orchestration, and result
//! persistence.

pub mod builtins;
pub mod config;
pub mod export;
pub mod solve;

pub use builtins::{builtin, BUILTIN_NAMES};
pub use config::{load_config_file, load_problem, LoadedConfig, RunOverrides};
pub use export::{
    export, export_with_source, import_run, read_points, ImportedRun, Manifest, RunSource,
};
pub use solve::{
    default_crosscheck_points, resolve_kappa, solve, KappaPolicy, RunConfig, RunResult,
    SaddleField, RESIDUAL_WARN,
};
