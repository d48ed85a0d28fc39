use std::path::PathBuf;

use thiserror::Error;
use tightbox_core::boxbags::BoxError;
use tightbox_core::metrics::MetricError;
use tightbox_core::milloss::LossError;
use tightbox_core::optim::OptimError;
use tightbox_core::segmodel::ModelError;
use tightbox_core::synth::SynthError;
use tightbox_core::GradError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse { path: PathBuf, offset: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("non-finite loss on sample {sample} at iteration {iteration}")]
    NonFiniteLoss { sample: String, iteration: usize },
    #[error("no trained model for sample {0}")]
    MissingModel(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Errors caused by what the user asked for rather than by the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Box(BoxError::AngleSyntax(_) | BoxError::BadAngles { .. }))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
