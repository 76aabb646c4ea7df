// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment harness: config-driven runs over a query corpus, content-addressed
//! run directories, and table and plot emission.

pub mod config;
pub mod demo;
pub mod plot;
pub mod report;
pub mod run;

use thiserror::Error;

pub use config::{Experiment, ModelSpec, RunConfig};
pub use report::{emit_report, Format, Manifest};
pub use run::{execute, run_experiment, ExperimentReport, QueryRecord};

/// Harness failures, split by exit code.
#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad or inconsistent configuration (exit code 2).
    #[error("config error: {0}")]
    Config(String),
    /// Failure while running or reporting (exit code 3).
    #[error("run error: {0}")]
    Run(String),
    /// Filesystem failure (exit code 3).
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// Serialization failure (exit code 3).
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Process exit code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 3,
        }
    }
}

impl From<beliefscope::Error> for HarnessError {
    fn from(e: beliefscope::Error) -> Self {
        match e {
            beliefscope::Error::Config(m) => Self::Config(m),
            other => Self::Run(other.to_string()),
        }
    }
}
