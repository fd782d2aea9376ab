use thiserror::Error;

use crate::decoding::DecodeError;
use crate::io::IoError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::training::TrainError;
use crate::viz::VizError;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Viz(#[from] VizError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
