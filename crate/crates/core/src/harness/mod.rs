//! Experiment harness: synthetic data, logging-policy training, evaluation,
//! sweeps and the flat config format used by the command-line tool.

pub mod config;
pub mod experiment;
pub mod synthetic;

pub use config::Config;
pub use experiment::{
    evaluate_policy, run_experiment, summarize, train_logging_policy, write_metrics_csv,
    write_summary_csv, CellFailure, DataSource, ExperimentConfig, ExperimentResult, LoggingConfig,
    MetricsRow, SummaryRow,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use thiserror::Error;

use crate::bounds::BoundsError;
use crate::data::DataError;
use crate::estimators::EstimatorError;
use crate::policy::PolicyError;
use crate::trainers::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("logging fraction leaves {rows} training rows for {classes} classes")]
    TooFewLoggingRows { rows: usize, classes: usize },
    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
