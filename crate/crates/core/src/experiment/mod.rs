//! Config-driven experiment runner behind the command-line tool.

pub mod config;
pub mod metrics;
pub mod runner;

pub use config::{Algorithm, Clock, RunConfig, TransportKind, KEYS};
pub use metrics::{emit_metrics, read_metrics, MetricsRow, MetricsWriter, HEADER};
pub use runner::{
    build_plan, eval_subset, gibbs_config, load_dataset, run_experiment, run_on_dataset,
    serve_worker, server_config, summarize, RunSummary,
};
