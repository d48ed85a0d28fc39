//! Run configuration: everything a training run depends on.
//!
//! A config file is JSON; any field left out keeps its default, unknown
//! fields are rejected.
//!
//! ```json
//! {
//!   "model": "direct-logit",
//!   "supervision": "boxes",
//!   "bags": { "scheme": "generalized", "angles": { "theta1": -40, "theta2": 40, "step": 20 } },
//!   "loss": { "bag_reduce": "alpha-softmax", "alpha": 6 },
//!   "optim": { "lr": 0.05, "iterations": 2000 }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use tightbox_core::{BagScheme, LossConfig, ModelKind, OptimConfig};

use crate::error::{Error, Result};
use crate::formats::read_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Supervision {
    /// MIL loss on bags derived from the tight boxes.
    Boxes,
    /// Per-pixel cross-entropy on the ground-truth masks (upper bound).
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub supervision: Supervision,
    pub bags: BagScheme,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    /// Probability threshold for turning predictions into masks.
    pub threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::TinyConv,
            supervision: Supervision::Boxes,
            bags: BagScheme::Baseline,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            threshold: 0.5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optim.validate().map_err(|e| Error::Config(e.to_string()))?;
        if let BagScheme::Generalized { angles } = &self.bags {
            angles.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short label such as `generalized(-40:40:20)+alpha-softmax(6)`.
    pub fn describe(&self) -> String {
        if self.supervision == Supervision::Full {
            return "full supervision".into();
        }
        let bags = match &self.bags {
            BagScheme::Baseline => "baseline".to_string(),
            BagScheme::Generalized { angles } => format!("generalized({angles})"),
        };
        match (self.loss.bag_reduce, self.loss.alpha) {
            (tightbox_core::BagReduce::ExactMax, _) => bags,
            (r, a) => {
                let name = serde_json::to_value(r).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
                format!("{bags}+{name}({})", a.unwrap_or(f64::NAN))
            }
        }
    }
}
