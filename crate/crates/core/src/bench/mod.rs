//! Experiment orchestration: sweeps over models, modes and plans, the
//! append-only results store, aggregation and reports.

mod aggregate;
mod config;
mod experiment;
mod report;
mod store;

pub use aggregate::{
    aggregate, cross_domain_matrices, cross_domain_table, fraction_table, mean_std, scaling_curves, AggregateRow,
    Aggregation, DomainMatrix, DomainRow, GroupBy, MeanStd, Metric, ModelRow, ScalingCurve,
};
pub use config::{BenchConfig, StdKind};
pub use experiment::{
    cross_domain_plans, evaluate_checkpoint, load_backbone, run_cross_domain_experiment, run_plans,
    run_scaling_experiment, run_session, session_artifacts, LoadedBackbone, RunFailure, SessionCoords, SkippedModel, SweepOptions,
    SweepReport,
};
pub use report::{emit_report, ReportFiles, ReportFormat};
pub use store::{config_digest, CorruptLine, ResultsStore, RunRecord, STORE_SCHEMA_VERSION};
