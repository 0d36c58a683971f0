//! The end-to-end pipeline behind the `ckoop` binary.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod svg;
pub mod validation;

pub use config::ExperimentConfig;
pub use pipeline::{all, calibrate, collect, fit, report as render_report, run, synth, validate, Layout};
pub use validation::ValidationSummary;
