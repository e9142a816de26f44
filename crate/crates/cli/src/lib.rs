//! Experiment harness: configuration, pipeline stages and exit codes for the
//! `segfuse` binary.

pub mod config;
pub mod pipeline;

pub use config::{ExperimentConfig, Overrides};
pub use pipeline::{EvalModel, Evaluation, RunLayout, TrainStage};

use segfuse::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_ARTIFACT: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Shape(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING_ARTIFACT,
        Error::Io { .. } | Error::Image { .. } | Error::Format(_) => EXIT_IO,
        Error::Contract(_) => EXIT_INTERNAL,
    }
}
