//! Weakly supervised segmentation from tight bounding boxes.
//!
//! The crate is `no_std` (it needs `alloc`) and holds the numerical part of the
//! method:
//!
//! - [`ndgrad`]: a dense-array engine with tape-based reverse-mode autodiff,
//! - [`boxbags`]: tight boxes and positive/negative bag generation, both the
//!   row/column baseline and angled crossing lines with per-pixel negatives,
//! - [`milloss`]: bag predictions (exact max, alpha-softmax, alpha-quasimax),
//!   cross-entropy and focal unary losses, pairwise smoothness,
//! - [`segmodel`]: a direct per-pixel logit model and a tiny convolutional net,
//! - [`optim`]: bias-corrected Adam,
//! - [`synth`]: deterministic synthetic datasets with tight boxes,
//! - [`metrics`]: binarization and the Dice coefficient.
//!
//! File formats, the training driver and the command line live in the
//! `tightbox` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod boxbags;
pub mod math;
pub mod metrics;
pub mod milloss;
pub mod ndgrad;
pub mod optim;
pub mod segmodel;
pub mod synth;

pub use boxbags::{AngleSet, Bag, BagScheme, BoxLabel, CategoryBags, PackedBags, Polarity};
pub use milloss::{BagReduce, LossBreakdown, LossConfig, UnaryKind};
pub use ndgrad::{GradError, Graph, Tensor, Var};
pub use optim::{AdamState, OptimConfig};
pub use segmodel::{ModelKind, ModelParams};
