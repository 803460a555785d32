//! Experiment harness: toy data, baseline evaluation under an analytic cost
//! model, batch contamination, transfer, countermeasure sweeps and report
//! output.
//!
//! Cost is counted, not timed: every quantized matmul reports how many
//! multiply-accumulates ran in int8 and in half precision, and a
//! [`CostModel`] weighs them. Ratios compare sums over the whole image set.

mod config;
mod dataset;
mod eval;
mod experiments;
mod report;

pub use config::ExperimentConfig;
pub use dataset::{generate_toy_dataset, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION, MAX_CLASSES};
pub use eval::{
    batch_contamination, countermeasure_sweep, evaluate_baselines, evaluate_condition, perturb, transfer_eval,
    uniform_noise, BatchReport, ConditionStats, CostModel, EvalOptions, EvalReport, Ratios, SweepPoint,
};
pub use experiments::{ablation_stages, attack_each, AblationStage, SingleAttacks};
pub use report::{policy_label, render_report, write_report, ConditionRow, ReportFormat, Tabular, CSV_HEADER};
