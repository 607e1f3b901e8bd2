//! Command-line front end.

mod app;
mod verify;

pub use app::{
    parse_values, resolve_train_config, run, CONFIG_SCHEMA_VERSION, EXIT_FAILURE, EXIT_OK, EXIT_USAGE, THREADS_ENV,
};
pub use verify::{
    fusion_suite, gradcheck_suite, model_check, prop1_suite, prop2_suite, rank_expansion, run_suite, separated_triple,
    verify, RankExpansion, SuiteResult, VerifyOptions, VerifySummary, SUITES,
};
