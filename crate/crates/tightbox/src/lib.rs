//! Weakly supervised segmentation from tight bounding boxes: dataset IO,
//! training, evaluation and the `tightbox` command line.

pub mod config;
pub mod error;
pub mod evalkit;
pub mod formats;
pub mod selftest;
pub mod trainer;

pub use config::{ExperimentConfig, Supervision};
pub use error::{Error, Result};
pub use formats::Dataset;
pub use trainer::{train, BagCache, Checkpoint, RunLog, TrainOutcome, TrainedModel};
