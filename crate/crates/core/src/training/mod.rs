//! Objectives, optimizers, recurrent dropout, early stopping and the
//! training loop.

mod dropout;
mod early_stop;
mod loss;
mod mrt;
mod optim;
mod trainer;

pub use dropout::{make_dropout_plan, DropoutPlan, DropoutRates};
pub use early_stop::{EarlyStopPolicy, EvalOutcome};
pub use loss::{ce_objective, cross_entropy_loss, CrossEntropy};
pub use mrt::{expected_risk, mrt_loss, mrt_objective, sample_candidates, MrtConfig, MrtOutcome};
pub use optim::{
    adadelta_step, adam_step, clip_global_norm, rmsprop_step, sgd_step, OptimizerConfig, OptimizerState,
};
pub use trainer::{
    train_loop, validation_cross_entropy, validation_metric_loss, Objective, ParallelExample, TrainObserver, TrainSummary, TrainingConfig, UpdateLog, ValidationMetric,
};

use thiserror::Error;

use crate::decoding::DecodeError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("dropout rate for {site} is {rate}; must lie in [0, 1)")]
    DropoutRate { site: &'static str, rate: f64 },
    #[error("non-finite gradient for parameter {0:?}; step aborted")]
    NonFiniteGradient(String),
    #[error("gradient for unknown parameter {0:?}")]
    UnknownGradient(String),
    #[error("invalid training config field `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("checkpoint observer failed: {0}")]
    Observer(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}
