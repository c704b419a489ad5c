//! Experiment orchestration: dataset generation, training, evaluation,
//! multi-seed reports and the verification commands.

mod config;
mod pipeline;
mod report;
mod verify;

use std::path::Path;

use thiserror::Error;

pub use config::{
    desk_generator, DataConfig, ExperimentConfig, ModelConfig, Precision, TrainingConfig, DESK_S,
    OUTPUT_ROOT_ENV,
};
pub use pipeline::{
    build_generator, cmd_eval, cmd_eval_oracle, cmd_gen, cmd_run, cmd_train, DatasetPaths,
    GenSummary, RunEntry, RunRecord, TrainOutcome, CHECKPOINT_FILE, CURVE_FILE, METRICS_FILE,
    METRICS_TABLE_FILE, RUN_RECORD_FILE,
};
pub use report::{
    cmd_report, parse_kv, ComparisonReport, MetricStats, VariantRow, REPORT_KV_FILE,
    REPORT_TABLE_FILE,
};
pub use verify::{
    cmd_gradcheck, cmd_oracle_check, gradcheck_variant, oracle_check, oracle_check_with,
    ComposeFn, OracleCheckReport, OracleFailure, ORACLE_TOLERANCE,
};

use crate::metrics::MetricsError;
use crate::models::ModelError;
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 1,
            HarnessError::Runtime(_) => 2,
            HarnessError::Verification(_) => 3,
        }
    }
}

impl From<SynthError> for HarnessError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) | SynthError::Unreachable { .. } => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Spec(_) | ModelError::TaskMismatch { .. } => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for HarnessError {
    fn from(e: MetricsError) -> Self {
        Self::Runtime(e.to_string())
    }
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |e| HarnessError::Runtime(format!("{}: {e}", path.display()))
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    std::fs::write(path, contents).map_err(io_error(path))
}
