//! Staged pipeline around the `flowgen` library: every stage reads the
//! stamped outputs of earlier stages from a run directory and writes its own.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod report;
pub mod stages;

pub use config::{Pipeline, PipelineConfig};
pub use error::{CliError, Result};
pub use stages::{run_all, run_stage, Context, Stage};
