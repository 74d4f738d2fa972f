//! Desk-scale training harness.
//!
//! Small differentiable problems with exact gradient oracles, configurable
//! gradient noise (including spike injection and batch-variance emulation),
//! a pluggable shaping stage, and per-step telemetry.

pub mod metrics;
pub mod noise;
pub mod pipeline;
pub mod problem;
pub mod run;
pub mod schedule;

use std::fmt;

use crate::shaping::ShapingError;
use crate::state::StateError;

pub use metrics::{
    CheckpointStats, IntervalStats, RunMetrics, RunSummary, StepRecord, SummarySpec, CSV_HEADER,
};
pub use noise::{noisy_gradient, BatchAlternation, NoiseSpec};
pub use pipeline::{GradnormParams, PipelineConfig, PipelineMode, UpdateClipParams};
pub use problem::{ProblemSpec, ToyProblem};
pub use run::train;
pub use schedule::LrSchedule;

/// Errors from harness configuration and execution.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    InvalidConfig(String),
    Shaping(ShapingError),
    State(StateError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            TrainError::Shaping(e) => write!(f, "{e}"),
            TrainError::State(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ShapingError> for TrainError {
    fn from(e: ShapingError) -> Self {
        TrainError::Shaping(e)
    }
}

impl From<StateError> for TrainError {
    fn from(e: StateError) -> Self {
        TrainError::State(e)
    }
}
