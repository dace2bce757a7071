//! Configuration, pipeline orchestration and artifact export around `syz_core`.

pub mod artifacts;
pub mod config;
pub mod formats;
pub mod pipeline;

pub use config::{ConfigError, RunConfig, Stage};
pub use pipeline::{run, PipelineError, RunOutcome};
