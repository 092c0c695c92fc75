//! Experiment configuration, orchestration and the self-test suites.

pub mod config;
pub mod runner;
pub mod selftest;

pub use config::{preset_order, DatasetSource, ExperimentConfig, OrderSpec, SweepAxes, VariantSpec, ORDER_PRESETS};
pub use runner::{plan_runs, run_experiment, worker_count, ExperimentOutcome, RunPlan, RunResult, SummaryRow};
