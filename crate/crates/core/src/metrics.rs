//! Dice overlap and probability thresholding.

use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::ndgrad::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("mask lengths differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("prediction must be [C, H, W], got {0:?}")]
    BadPrediction(Vec<usize>),
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch(pred.len(), gt.len()));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(gt) {
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// One row-major mask per category: `p >= threshold`.
pub fn binarize(probs: &Tensor, threshold: f64) -> Result<Vec<Vec<bool>>, MetricError> {
    let [c, h, w] = probs.shape()[..] else {
        return Err(MetricError::BadPrediction(probs.shape().to_vec()));
    };
    Ok((0..c)
        .map(|k| probs.data()[k * h * w..(k + 1) * h * w].iter().map(|&p| p >= threshold).collect())
        .collect())
}

/// Mean and population standard deviation; `(0, 0)` for no values.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, math::sqrt(var))
}
