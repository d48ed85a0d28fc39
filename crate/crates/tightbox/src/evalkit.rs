//! Dice evaluation, method comparison tables and bag overlays.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tightbox_core::metrics::{binarize, dice, mean_std};
use tightbox_core::synth::{Sample, Split};
use tightbox_core::{AngleSet, Bag, BagReduce, BagScheme, BoxLabel, LossConfig, ModelKind, Polarity};

use crate::config::{ExperimentConfig, Supervision};
use crate::error::{Error, Result};
use crate::formats::{Dataset, Pgm};
use crate::trainer::{self, BagCache, Checkpoint, TrainOutcome};

/// Header line of every report: what the Dice numbers mean.
pub const REPORT_NOTE: &str = "# dice: 2D, computed per sample (mean over categories), std across samples";

/// Stable 64-bit FNV-1a hash of the canonical JSON form of a config.
pub fn fingerprint(cfg: &ExperimentConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    /// Dice per category, in category order.
    pub dice: Vec<f64>,
}

impl SampleScore {
    pub fn mean(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub fingerprint: String,
    pub threshold: f64,
    pub samples: Vec<SampleScore>,
    pub mean_dice: f64,
    pub std_dice: f64,
}

impl EvalReport {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Mean Dice of each category across samples.
    pub fn per_category_mean(&self) -> Vec<f64> {
        let c = self.samples.first().map_or(0, |s| s.dice.len());
        (0..c).map(|k| mean_std(&self.samples.iter().map(|s| s.dice[k]).collect::<Vec<_>>()).0).collect()
    }

    pub fn per_sample_csv(&self) -> String {
        let c = self.samples.first().map_or(0, |s| s.dice.len());
        let mut out = format!("{REPORT_NOTE}\nid");
        for k in 1..=c {
            let _ = write!(out, ",dice_c{k}");
        }
        out.push_str(",dice_mean\n");
        for s in &self.samples {
            out.push_str(&s.id);
            for d in &s.dice {
                let _ = write!(out, ",{d}");
            }
            let _ = writeln!(out, ",{}", s.mean());
        }
        out
    }
}

/// Scores a checkpoint on `samples`. Predictions are thresholded with `>=`.
pub fn evaluate(checkpoint: &Checkpoint, samples: &[&Sample], threshold: f64, method: &str, fingerprint: &str) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let scores = samples
        .par_iter()
        .map(|s| {
            let masks = binarize(&checkpoint.predict(s)?, threshold)?;
            if masks.len() != s.masks.len() {
                return Err(Error::Invalid(format!("sample {} has {} categories, model predicts {}", s.id, s.masks.len(), masks.len())));
            }
            let dice = masks.iter().zip(&s.masks).map(|(p, t)| dice(p, t)).collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(SampleScore { id: s.id.clone(), dice })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean_dice, std_dice) = mean_std(&scores.iter().map(SampleScore::mean).collect::<Vec<_>>());
    Ok(EvalReport {
        method: method.to_string(),
        fingerprint: fingerprint.to_string(),
        threshold,
        samples: scores,
        mean_dice,
        std_dice,
    })
}

/// `report.csv`: one row per method.
pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{REPORT_NOTE}\nmethod,mean_dice,std_dice,n_samples\n");
    for r in reports {
        let method = if r.method.contains([',', '"']) { format!("\"{}\"", r.method.replace('"', "\"\"")) } else { r.method.clone() };
        let _ = writeln!(out, "{method},{},{},{}", r.mean_dice, r.std_dice, r.n_samples());
    }
    out
}

pub fn write_report(path: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::write(path, report_csv(reports)).map_err(|e| Error::io(path, e))
}

/// A named row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub label: String,
    pub config: ExperimentConfig,
}

impl Method {
    pub fn new(config: ExperimentConfig) -> Self {
        Self { label: config.describe(), config }
    }
}

/// The comparison rows: baseline, three angle sets, each smooth maximum at
/// α ∈ {4, 6, 8} on baseline bags, the (−40, 40, 20) angle set with both
/// smooth maxima, and full supervision. Model and optimizer come from `base`.
pub fn default_methods(base: &ExperimentConfig) -> Vec<Method> {
    let with = |bags: BagScheme, reduce: BagReduce, alpha: Option<f64>| ExperimentConfig {
        supervision: Supervision::Boxes,
        bags,
        loss: LossConfig { bag_reduce: reduce, alpha, ..base.loss },
        ..base.clone()
    };
    let gen = |a: f64, b: f64, s: f64| BagScheme::Generalized { angles: AngleSet::new(a, b, s).expect("valid angle set") };
    let mut out = vec![with(BagScheme::Baseline, BagReduce::ExactMax, None)];
    for (a, b, s) in [(-40.0, 40.0, 10.0), (-40.0, 40.0, 20.0), (-60.0, 60.0, 30.0)] {
        out.push(with(gen(a, b, s), BagReduce::ExactMax, None));
    }
    for reduce in [BagReduce::AlphaSoftmax, BagReduce::AlphaQuasimax] {
        for alpha in [4.0, 6.0, 8.0] {
            out.push(with(BagScheme::Baseline, reduce, Some(alpha)));
        }
    }
    out.push(with(gen(-40.0, 40.0, 20.0), BagReduce::AlphaSoftmax, Some(6.0)));
    out.push(with(gen(-40.0, 40.0, 20.0), BagReduce::AlphaQuasimax, Some(6.0)));
    out.push(ExperimentConfig { supervision: Supervision::Full, ..base.clone() });
    out.into_iter().map(Method::new).collect()
}

/// Samples a method trains on when it is scored on `eval_split`.
///
/// A shared model learns from the training split. Direct-logit maps carry no
/// shared weights, so they are fitted on the evaluated samples themselves
/// (from their boxes, or their masks under full supervision).
pub fn training_samples<'a>(dataset: &'a Dataset, cfg: &ExperimentConfig, eval_split: Split) -> Vec<&'a Sample> {
    match cfg.model {
        ModelKind::TinyConv => dataset.split(Split::Train),
        ModelKind::DirectLogit => dataset.split(eval_split),
    }
}

/// Trains and scores one method.
pub fn run_method(method: &Method, dataset: &Dataset, eval_split: Split, cache: &BagCache) -> Result<(TrainOutcome, EvalReport)> {
    let train_set = training_samples(dataset, &method.config, eval_split);
    let outcome = trainer::train_with_cache(&train_set, &method.config, cache)?;
    let eval_set = dataset.split(eval_split);
    let report = evaluate(&outcome.checkpoint, &eval_set, method.config.threshold, &method.label, &fingerprint(&method.config))?;
    Ok((outcome, report))
}

/// One report per method, in the given order. Bags are shared across methods.
pub fn compare(methods: &[Method], dataset: &Dataset, eval_split: Split) -> Result<Vec<EvalReport>> {
    let cache = BagCache::new();
    methods.iter().map(|m| run_method(m, dataset, eval_split, &cache).map(|(_, r)| r)).collect()
}

/// Overlay grey levels.
pub const OVERLAY_BACKGROUND: u8 = 0;
pub const OVERLAY_NEGATIVE: u8 = 64;
pub const OVERLAY_POSITIVE: u8 = 192;
pub const OVERLAY_BOX: u8 = 255;

/// Renders boxes and bags: negative-bag pixels, positive-bag pixels, and each
/// box outline traced one pixel outside the box (clipped to the image).
pub fn overlay(height: usize, width: usize, boxes: &[BoxLabel], bags: &[Bag]) -> Pgm {
    let mut px = vec![OVERLAY_BACKGROUND; height * width];
    for bag in bags.iter().filter(|b| b.polarity == Polarity::Negative) {
        for p in &bag.pixels {
            px[p.row * width + p.col] = OVERLAY_NEGATIVE;
        }
    }
    for bag in bags.iter().filter(|b| b.polarity == Polarity::Positive) {
        for p in &bag.pixels {
            px[p.row * width + p.col] = OVERLAY_POSITIVE;
        }
    }
    for b in boxes {
        let (top, left) = (b.y0 as isize - 1, b.x0 as isize - 1);
        let (bottom, right) = (b.y1 as isize + 1, b.x1 as isize + 1);
        let mut mark = |r: isize, c: isize| {
            if (0..height as isize).contains(&r) && (0..width as isize).contains(&c) {
                px[r as usize * width + c as usize] = OVERLAY_BOX;
            }
        };
        for c in left..=right {
            mark(top, c);
            mark(bottom, c);
        }
        for r in top..=bottom {
            mark(r, left);
            mark(r, right);
        }
    }
    Pgm { width, height, maxval: 255, bytes: px }
}

pub fn dump_bags(sample: &Sample, bags: &[Bag], path: &Path) -> Result<()> {
    overlay(sample.image.height, sample.image.width, &sample.boxes, bags).write(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tightbox_core::boxbags::baseline_positive_bags;
    use tightbox_core::CategoryBags;

    #[test]
    fn zero_angle_overlay_marks_box_interior() {
        let b = BoxLabel::new(2, 3, 5, 5, 1);
        let bags = CategoryBags::build(&[b], 1, 10, 10, &BagScheme::Generalized { angles: AngleSet::zero() }).unwrap();
        assert_eq!(bags.positives.len(), 7);
        let pos_only = overlay(10, 10, &[], &bags.positives);
        assert_eq!(pos_only.bytes.iter().filter(|&&v| v == OVERLAY_POSITIVE).count(), 12);
        let baseline = overlay(10, 10, &[], &baseline_positive_bags(&b));
        assert_eq!(baseline, pos_only);
    }

    #[test]
    fn empty_bags_draw_only_the_box() {
        let b = BoxLabel::new(0, 0, 2, 1, 1);
        let o = overlay(4, 5, &[b], &[]);
        let marked: Vec<usize> = (0..20).filter(|&k| o.bytes[k] == OVERLAY_BOX).collect();
        // the outline sits at row 2 and column 3; rows/cols -1 are clipped
        assert_eq!(marked, vec![3, 8, 10, 11, 12, 13]);
        assert!(o.bytes.iter().all(|&v| v == OVERLAY_BOX || v == OVERLAY_BACKGROUND));
    }

    #[test]
    fn report_layout() {
        let r = EvalReport {
            method: "a,b".into(),
            fingerprint: "0".into(),
            threshold: 0.5,
            samples: vec![SampleScore { id: "s".into(), dice: vec![0.5, 1.0] }],
            mean_dice: 0.75,
            std_dice: 0.0,
        };
        let csv = report_csv(std::slice::from_ref(&r));
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], "method,mean_dice,std_dice,n_samples");
        assert_eq!(lines[2], "\"a,b\",0.75,0,1");
        assert_eq!(r.per_category_mean(), vec![0.5, 1.0]);
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        b.threshold = 0.4;
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }

    #[test]
    fn default_methods_cover_tables() {
        let m = default_methods(&ExperimentConfig::default());
        assert_eq!(m.len(), 13);
        assert_eq!(m[0].label, "baseline");
        assert_eq!(m.last().unwrap().label, "full supervision");
        let labels: std::collections::HashSet<_> = m.iter().map(|x| &x.label).collect();
        assert_eq!(labels.len(), m.len());
    }
}
