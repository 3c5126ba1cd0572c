//! Batch harness around the `pedcov` library: ingest annotation scenes,
//! train the goal model and CovarianceNet, evaluate a predictor on the
//! held-out scene, and tabulate the reports.

pub mod commands;
pub mod config;
pub mod output;
pub mod svg;

pub use commands::{
    cmd_eval, cmd_ingest, cmd_report, cmd_synth, cmd_train, predict_records, split_windows, write_eval_outputs,
    IngestSummary, Layout, SynthOptions,
};
pub use config::{Overrides, RunConfig, Split, Target, SCHEMA_VERSION};
