//! Synthetic multi-task suite, joint training loop, Adam, the `delta_m`
//! metric and gradient-conflict instrumentation.

mod config;
mod metrics;
mod optim;
mod run;
mod suite;

pub use config::TrainConfig;
pub use metrics::{delta_m, format_delta_m, mse, mtl_loss};
pub use optim::{optimizer_step, AdamHyper, AdamState};
pub use run::{
    baseline_metrics, train, train_single_task, train_with_baselines, EpochRecord, KernelCorrelation, ParamCounts,
    RunReport, TrainOutcome, BASELINE_NOTE, REPORT_FORMAT, REPORT_VERSION,
};
pub use suite::{make_suite_for, make_toy_suite, operator, TargetOperator, ToyDataset, ToyTask, NUM_OPERATORS};
