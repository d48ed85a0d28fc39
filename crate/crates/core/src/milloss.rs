//! Differentiable MIL loss: bag predictions, unary and pairwise terms.
//!
//! For category `c` the loss is `unary_c + λ · pairwise_c`, summed over
//! categories. The bag prediction `P_c(b)` is the maximum of the bag's pixel
//! probabilities or one of two smooth stand-ins:
//!
//! - alpha-softmax `S(x) = Σ x_i e^{α x_i} / Σ e^{α x_i}`,
//! - alpha-quasimax `Q(x) = (1/α) log Σ e^{α x_i} − (log n)/α`, a lower bound
//!   of the maximum.
//!
//! Both are evaluated with the bag maximum subtracted inside the exponent.

use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxbags::{Bag, CategoryBags, PackedBags};
use crate::math;
use crate::ndgrad::{GradError, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("bag is empty")]
    EmptyBag,
    #[error("unary loss needs at least one positive or negative bag")]
    NoBags,
    #[error("invalid loss configuration: {0}")]
    Config(&'static str),
    #[error("prediction map shape {0:?} is not [C, H, W]")]
    BadPrediction(Vec<usize>),
}

type Result<T> = core::result::Result<T, LossError>;

/// How a bag's pixel probabilities become one bag prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BagReduce {
    ExactMax,
    AlphaSoftmax,
    AlphaQuasimax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnaryKind {
    /// Binary cross-entropy over bags, normalized by the bag count.
    Ce,
    /// Focal variant weighted by `β`, focused by `γ`, normalized by `max(1, |B⁺|)`.
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the pairwise term.
    pub lambda_pair: f64,
    pub beta: f64,
    pub gamma: f64,
    pub bag_reduce: BagReduce,
    /// Sharpness of the smooth maximum; required for the smooth reductions only.
    pub alpha: Option<f64>,
    pub unary_kind: UnaryKind,
    /// Bag predictions are clamped to `[epsilon, 1 − epsilon]` before the logs.
    pub epsilon: f64,
    /// Apply the smooth maximum to negative bags as well as positive ones.
    pub smooth_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pair: 10.0,
            beta: 0.25,
            gamma: 2.0,
            bag_reduce: BagReduce::ExactMax,
            alpha: None,
            unary_kind: UnaryKind::Focal,
            epsilon: 1e-7,
            smooth_negatives: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let smooth = self.bag_reduce != BagReduce::ExactMax;
        match (smooth, self.alpha) {
            (true, None) => return Err(LossError::Config("alpha is required for a smooth bag reduction")),
            (false, Some(_)) => return Err(LossError::Config("alpha is only valid with a smooth bag reduction")),
            (true, Some(a)) if !(a > 0.0 && a.is_finite()) => return Err(LossError::Config("alpha must be positive")),
            _ => {}
        }
        if !(self.lambda_pair >= 0.0) {
            return Err(LossError::Config("lambda_pair must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(LossError::Config("beta must lie in [0, 1]"));
        }
        if !(self.gamma >= 0.0) {
            return Err(LossError::Config("gamma must be non-negative"));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(LossError::Config("epsilon must lie in (0, 1e-3]"));
        }
        Ok(())
    }

    fn reduce_for_negatives(&self) -> BagReduce {
        if self.smooth_negatives {
            self.bag_reduce
        } else {
            BagReduce::ExactMax
        }
    }
}

/// Reduces each run of `values` (1-D) delimited by `offsets` to one value.
pub fn smooth_max_segments(
    g: &mut Graph,
    values: Var,
    offsets: &Arc<[usize]>,
    reduce: BagReduce,
    alpha: Option<f64>,
) -> Result<Var> {
    let n_seg = offsets.len().saturating_sub(1);
    if n_seg == g.value(values).len() && g.value(values).rank() == 1 {
        // every run is a single value, for which all three reductions are the identity
        return Ok(values);
    }
    if reduce == BagReduce::ExactMax {
        return Ok(g.segment_max(values, offsets.clone())?);
    }
    let alpha = alpha.ok_or(LossError::Config("alpha is required for a smooth bag reduction"))?;
    let m = g.segment_max(values, offsets.clone())?;
    let shift = g.value(m).clone();
    let shift = g.constant(shift);
    let shift_each = g.segment_expand(shift, offsets.clone())?;
    let centered = g.sub(values, shift_each)?;
    let a = g.scalar(alpha);
    let z = g.mul(centered, a)?;
    let w = g.exp(z);
    let denom = g.segment_sum(w, offsets.clone())?;
    match reduce {
        BagReduce::AlphaSoftmax => {
            let xw = g.mul(values, w)?;
            let num = g.segment_sum(xw, offsets.clone())?;
            Ok(g.div(num, denom)?)
        }
        BagReduce::AlphaQuasimax => {
            // shift + (ln Σ e^{α(x − shift)} − ln n) / α; equal entries give exactly shift
            let lse = g.log(denom)?;
            let counts: Vec<f64> = offsets.windows(2).map(|w| math::ln((w[1] - w[0]) as f64)).collect();
            let counts = g.constant(Tensor::vector(counts));
            let t = g.sub(lse, counts)?;
            let t = g.div(t, a)?;
            Ok(g.add(shift, t)?)
        }
        BagReduce::ExactMax => unreachable!(),
    }
}

/// Predictions of all bags in `packed`, read from the flat channel `probs_c`.
pub fn bag_predictions(g: &mut Graph, probs_c: Var, packed: &PackedBags, reduce: BagReduce, alpha: Option<f64>) -> Result<Var> {
    let picked = g.gather(probs_c, packed.indices.clone())?;
    smooth_max_segments(g, picked, &packed.offsets, reduce, alpha)
}

/// Prediction `P_c(b)` of a single bag; `probs_c` is one `[H, W]` channel.
pub fn bag_prediction(g: &mut Graph, probs_c: Var, bag: &Bag, cfg: &LossConfig) -> Result<Var> {
    let width = *g.shape(probs_c).last().ok_or(LossError::BadPrediction(Vec::new()))?;
    if bag.is_empty() {
        return Err(LossError::EmptyBag);
    }
    let packed = PackedBags::pack(core::slice::from_ref(bag), width).ok_or(LossError::EmptyBag)?;
    let p = bag_predictions(g, probs_c, &packed, cfg.bag_reduce, cfg.alpha)?;
    Ok(g.reshape(p, &[])?)
}

/// Value and gradient of a bag reduction on a plain vector.
pub fn smooth_max_with_grad(xs: &[f64], reduce: BagReduce, alpha: Option<f64>) -> Result<(f64, Vec<f64>)> {
    if xs.is_empty() {
        return Err(LossError::EmptyBag);
    }
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(xs.to_vec()));
    let offsets: Arc<[usize]> = Arc::from(alloc::vec![0, xs.len()]);
    let y = smooth_max_segments(&mut g, x, &offsets, reduce, alpha)?;
    let y = g.sum(y, None)?;
    g.backward(y)?;
    Ok((g.value(y).item(), g.grad(x).unwrap().to_vec()))
}

fn clamped(g: &mut Graph, p: Var, eps: f64) -> Var {
    g.clamp(p, eps, 1.0 - eps)
}

/// `Σ log P` (or `Σ log(1 − P)` when `complement`) with optional per-term weights.
fn weighted_log_sum(g: &mut Graph, p: Var, complement: bool, weight: Option<(f64, f64)>, eps: f64) -> Result<Var> {
    let p = clamped(g, p, eps);
    let arg = if complement {
        let one = g.scalar(1.0);
        g.sub(one, p)?
    } else {
        p
    };
    let mut terms = g.log(arg)?;
    if let Some((coef, gamma)) = weight {
        // focal modulation: (1 − P)^γ for positives, P^γ for negatives
        let base = if complement {
            p
        } else {
            let one = g.scalar(1.0);
            g.sub(one, p)?
        };
        let modulation = g.powf(base, gamma)?;
        terms = g.mul(terms, modulation)?;
        let c = g.scalar(coef);
        terms = g.mul(terms, c)?;
    }
    Ok(g.sum(terms, None)?)
}

fn count(g: &Graph, v: Option<Var>) -> usize {
    v.map_or(0, |v| g.value(v).len())
}

/// `−(Σ log P + Σ log(1 − P)) / (|B⁺| + |B⁻|)`.
pub fn unary_ce(g: &mut Graph, pos: Option<Var>, neg: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    let n = count(g, pos) + count(g, neg);
    if n == 0 {
        return Err(LossError::NoBags);
    }
    let mut acc = g.scalar(0.0);
    if let Some(p) = pos {
        let s = weighted_log_sum(g, p, false, None, cfg.epsilon)?;
        acc = g.add(acc, s)?;
    }
    if let Some(p) = neg {
        let s = weighted_log_sum(g, p, true, None, cfg.epsilon)?;
        acc = g.add(acc, s)?;
    }
    let k = g.scalar(-1.0 / n as f64);
    Ok(g.mul(acc, k)?)
}

/// `−(Σ β (1−P)^γ log P + Σ (1−β) P^γ log(1−P)) / max(1, |B⁺|)`.
pub fn unary_focal(g: &mut Graph, pos: Option<Var>, neg: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    let n_pos = count(g, pos);
    if n_pos + count(g, neg) == 0 {
        return Err(LossError::NoBags);
    }
    let mut acc = g.scalar(0.0);
    if let Some(p) = pos {
        let s = weighted_log_sum(g, p, false, Some((cfg.beta, cfg.gamma)), cfg.epsilon)?;
        acc = g.add(acc, s)?;
    }
    if let Some(p) = neg {
        let s = weighted_log_sum(g, p, true, Some((1.0 - cfg.beta, cfg.gamma)), cfg.epsilon)?;
        acc = g.add(acc, s)?;
    }
    let k = g.scalar(-1.0 / n_pos.max(1) as f64);
    Ok(g.mul(acc, k)?)
}

/// Flat index pairs of 4-adjacent pixels, each unordered pair once.
pub fn neighbor_pairs(height: usize, width: usize) -> (Arc<[usize]>, Arc<[usize]>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for r in 0..height {
        for c in 0..width {
            let k = r * width + c;
            if c + 1 < width {
                a.push(k);
                b.push(k + 1);
            }
            if r + 1 < height {
                a.push(k);
                b.push(k + width);
            }
        }
    }
    (a.into(), b.into())
}

/// Mean squared difference over 4-adjacent pixel pairs of one `[H, W]` channel.
/// A single-pixel map has no pairs and scores zero.
pub fn pairwise_smooth(g: &mut Graph, probs_c: Var) -> Result<Var> {
    let shape = g.shape(probs_c);
    let (h, w) = match *shape {
        [h, w] => (h, w),
        [n] => (1, n),
        _ => return Err(LossError::BadPrediction(shape.to_vec())),
    };
    let pairs = neighbor_pairs(h, w);
    pairwise_with_pairs(g, probs_c, &pairs)
}

fn pairwise_with_pairs(g: &mut Graph, probs_c: Var, pairs: &(Arc<[usize]>, Arc<[usize]>)) -> Result<Var> {
    if pairs.0.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let left = g.gather(probs_c, pairs.0.clone())?;
    let right = g.gather(probs_c, pairs.1.clone())?;
    let d = g.sub(left, right)?;
    let d2 = g.square(d);
    Ok(g.mean(d2, None)?)
}

/// Packed bags of one category, ready for repeated loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBags {
    pub category: usize,
    pub positives: Option<PackedBags>,
    pub negatives: Option<PackedBags>,
}

impl PreparedBags {
    pub fn new(bags: &CategoryBags, width: usize) -> Self {
        Self {
            category: bags.category,
            positives: bags.packed_positives(width),
            negatives: bags.packed_negatives(width),
        }
    }
}

/// The scalar nodes of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: Var,
    /// `(category, unary, pairwise)` in category order.
    pub per_category: Vec<(usize, Var, Var)>,
}

/// `unary + λ · pairwise` for one `[H, W]` channel. Returns `(total, unary, pairwise)`.
pub fn category_loss(g: &mut Graph, probs_c: Var, bags: &PreparedBags, cfg: &LossConfig) -> Result<(Var, Var, Var)> {
    let shape = g.shape(probs_c).to_vec();
    let [h, w] = shape[..] else {
        return Err(LossError::BadPrediction(shape));
    };
    category_loss_inner(g, probs_c, bags, cfg, &neighbor_pairs(h, w))
}

fn category_loss_inner(
    g: &mut Graph,
    probs_c: Var,
    bags: &PreparedBags,
    cfg: &LossConfig,
    pairs: &(Arc<[usize]>, Arc<[usize]>),
) -> Result<(Var, Var, Var)> {
    let pos = match &bags.positives {
        Some(p) => Some(bag_predictions(g, probs_c, p, cfg.bag_reduce, cfg.alpha)?),
        None => None,
    };
    let neg = match &bags.negatives {
        Some(p) => Some(bag_predictions(g, probs_c, p, cfg.reduce_for_negatives(), cfg.alpha)?),
        None => None,
    };
    let unary = match cfg.unary_kind {
        UnaryKind::Ce => unary_ce(g, pos, neg, cfg)?,
        UnaryKind::Focal => unary_focal(g, pos, neg, cfg)?,
    };
    let pairwise = pairwise_with_pairs(g, probs_c, pairs)?;
    let lam = g.scalar(cfg.lambda_pair);
    let weighted = g.mul(pairwise, lam)?;
    let total = g.add(unary, weighted)?;
    Ok((total, unary, pairwise))
}

/// Splits a `[C, H, W]` map into `C` flat-indexed `[H, W]` channels.
pub fn channels(g: &mut Graph, probs: Var) -> Result<Vec<Var>> {
    let shape = g.shape(probs).to_vec();
    let [c, h, w] = shape[..] else {
        return Err(LossError::BadPrediction(shape));
    };
    let mut out = Vec::with_capacity(c);
    for k in 0..c {
        let idx: Arc<[usize]> = (k * h * w..(k + 1) * h * w).collect();
        let flat = g.gather(probs, idx)?;
        out.push(g.reshape(flat, &[h, w])?);
    }
    Ok(out)
}

/// Sum of the category losses over a `[C, H, W]` prediction map.
///
/// `bags` holds one entry per category (1-based `category` fields).
pub fn total_loss(g: &mut Graph, probs: Var, bags: &[PreparedBags], cfg: &LossConfig) -> Result<LossBreakdown> {
    let chans = channels(g, probs)?;
    let shape = g.shape(probs).to_vec();
    let pairs = neighbor_pairs(shape[1], shape[2]);
    let mut total = g.scalar(0.0);
    let mut per_category = Vec::with_capacity(bags.len());
    for b in bags {
        let ch = *chans
            .get(b.category.wrapping_sub(1))
            .ok_or(LossError::Config("bag category outside the prediction channels"))?;
        let (t, u, p) = category_loss_inner(g, ch, b, cfg, &pairs)?;
        total = g.add(total, t)?;
        per_category.push((b.category, u, p));
    }
    Ok(LossBreakdown { total, per_category })
}

/// Mean per-pixel binary cross-entropy against ground-truth masks, the fully
/// supervised reference loss. `targets` is row-major `[C, H, W]` in `{0, 1}`.
pub fn pixel_bce(g: &mut Graph, probs: Var, targets: &[f64], eps: f64) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    let t = Tensor::new(shape.clone(), targets.to_vec()).map_err(|_| LossError::BadPrediction(shape))?;
    let y = g.constant(t);
    let p = clamped(g, probs, eps);
    let one = g.scalar(1.0);
    let q = g.sub(one, p)?;
    let lp = g.log(p)?;
    let lq = g.log(q)?;
    let ny = g.sub(one, y)?;
    let a = g.mul(y, lp)?;
    let b = g.mul(ny, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s, None)?;
    let k = g.scalar(-1.0);
    Ok(g.mul(m, k)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxbags::{AngleSet, BagScheme, BoxLabel};
    use alloc::vec;

    fn leaf(g: &mut Graph, xs: &[f64]) -> Var {
        g.leaf(Tensor::vector(xs.to_vec()))
    }

    fn cfg(reduce: BagReduce, alpha: Option<f64>) -> LossConfig {
        LossConfig { bag_reduce: reduce, alpha, ..LossConfig::default() }
    }

    #[test]
    fn defaults_match_reported_constants() {
        let c = LossConfig::default();
        assert_eq!((c.lambda_pair, c.beta, c.gamma), (10.0, 0.25, 2.0));
        assert_eq!(c.epsilon, 1e-7);
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(cfg(BagReduce::AlphaSoftmax, None).validate().is_err());
        assert!(cfg(BagReduce::ExactMax, Some(4.0)).validate().is_err());
        assert!(cfg(BagReduce::AlphaQuasimax, Some(0.0)).validate().is_err());
        assert!(LossConfig { epsilon: 0.01, ..LossConfig::default() }.validate().is_err());
        assert!(LossConfig { beta: 1.5, ..LossConfig::default() }.validate().is_err());
        cfg(BagReduce::AlphaQuasimax, Some(8.0)).validate().unwrap();
    }

    #[test]
    fn bag_reductions() {
        let (v, _) = smooth_max_with_grad(&[0.1, 0.7, 0.3], BagReduce::ExactMax, None).unwrap();
        assert_eq!(v, 0.7);
        for alpha in [0.5, 4.0, 8.0, 50.0] {
            let (v, _) = smooth_max_with_grad(&[0.37, 0.37], BagReduce::AlphaQuasimax, Some(alpha)).unwrap();
            assert!((v - 0.37).abs() < 1e-15);
        }
        // e^4 / (1 + e^4)
        let (v, _) = smooth_max_with_grad(&[0.0, 1.0], BagReduce::AlphaSoftmax, Some(4.0)).unwrap();
        assert!((v - 0.982_013_790_037_908_4).abs() < 1e-12);
        // ln(1 + e^8)/8 − ln 2 / 8
        let (v, _) = smooth_max_with_grad(&[0.0, 1.0], BagReduce::AlphaQuasimax, Some(8.0)).unwrap();
        assert!((v - 0.913_398_528_226_618_8).abs() < 1e-12, "{v}");
        assert!(smooth_max_with_grad(&[], BagReduce::ExactMax, None).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let (v, g) = smooth_max_with_grad(&[900.0, 1000.0, -500.0], BagReduce::AlphaSoftmax, Some(8.0)).unwrap();
        assert!((v - 1000.0).abs() < 1e-9);
        assert!(g.iter().all(|d| d.is_finite()));
        let (v, _) = smooth_max_with_grad(&[900.0, 1000.0], BagReduce::AlphaQuasimax, Some(8.0)).unwrap();
        assert!(v <= 1000.0 && v > 999.0);
    }

    #[test]
    fn single_bag_prediction() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![2, 2], vec![0.1, 0.7, 0.3, 0.2]).unwrap());
        let bag = &crate::boxbags::baseline_positive_bags(&BoxLabel::new(0, 0, 1, 0, 1))[0];
        let v = bag_prediction(&mut g, p, bag, &LossConfig::default()).unwrap();
        assert_eq!(g.value(v).item(), 0.7);
    }

    #[test]
    fn ce_values() {
        let c = LossConfig { unary_kind: UnaryKind::Ce, ..LossConfig::default() };
        let mut g = Graph::new();
        let p = leaf(&mut g, &[0.5]);
        let l = unary_ce(&mut g, Some(p), None, &c).unwrap();
        assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-15);

        let eps = c.epsilon;
        let p = leaf(&mut g, &[1.0 - eps, 1.0]);
        let n = leaf(&mut g, &[eps, 0.0]);
        let l = unary_ce(&mut g, Some(p), Some(n), &c).unwrap();
        assert!((g.value(l).item() + math::ln(1.0 - eps)).abs() < 1e-12);
        assert!(g.value(l).item() < 1e-6);
        assert_eq!(unary_ce(&mut g, None, None, &c), Err(LossError::NoBags));
    }

    #[test]
    fn focal_values() {
        let c = LossConfig::default();
        let mut g = Graph::new();
        let p = leaf(&mut g, &[0.5]);
        let l = unary_focal(&mut g, Some(p), None, &c).unwrap();
        // 0.25 · 0.5² · ln 2
        assert!((g.value(l).item() - 0.25 * 0.25 * core::f64::consts::LN_2).abs() < 1e-15);
        assert!((g.value(l).item() - 0.043_321_698_784_996_58).abs() < 1e-12);

        let p = leaf(&mut g, &[1.0, 1.0]);
        let n = leaf(&mut g, &[0.0]);
        let l = unary_focal(&mut g, Some(p), Some(n), &c).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn focal_at_gamma_zero_is_scaled_ce() {
        let pos = [0.3, 0.8, 0.55];
        let neg = [0.1, 0.45];
        let focal = LossConfig { gamma: 0.0, beta: 0.5, ..LossConfig::default() };
        let ce = LossConfig { unary_kind: UnaryKind::Ce, ..focal };
        let mut g = Graph::new();
        let (p, n) = (leaf(&mut g, &pos), leaf(&mut g, &neg));
        let f = unary_focal(&mut g, Some(p), Some(n), &focal).unwrap();
        let c = unary_ce(&mut g, Some(p), Some(n), &ce).unwrap();
        let scale = (pos.len() + neg.len()) as f64 / (2.0 * pos.len() as f64);
        assert!((g.value(f).item() - scale * g.value(c).item()).abs() < 1e-14);
    }

    #[test]
    fn pairwise_values() {
        let mut g = Graph::new();
        let flat = g.leaf(Tensor::full(&[3, 4], 0.4).unwrap());
        let l = pairwise_smooth(&mut g, flat).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let m = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let l = pairwise_smooth(&mut g, m).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let m = g.leaf(Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let l = pairwise_smooth(&mut g, m).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let one = g.leaf(Tensor::new(vec![1, 1], vec![0.3]).unwrap());
        let l = pairwise_smooth(&mut g, one).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert_eq!(neighbor_pairs(3, 4).0.len(), 3 * 3 + 2 * 4);
    }

    #[test]
    fn lambda_zero_is_unary_only_and_categories_add() {
        let (h, w) = (6, 6);
        let boxes = [BoxLabel::new(1, 1, 3, 4, 1)];
        let scheme = BagScheme::Generalized { angles: AngleSet::new(-30.0, 30.0, 30.0).unwrap() };
        let cat = CategoryBags::build(&boxes, 1, h, w, &scheme).unwrap();
        let prep = PreparedBags::new(&cat, w);
        let vals: Vec<f64> = (0..h * w).map(|k| 0.05 + 0.9 * ((k * 7 % 11) as f64 / 10.0)).collect();
        let c0 = LossConfig { lambda_pair: 0.0, ..LossConfig::default() };
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![h, w], vals.clone()).unwrap());
        let (t, u, _) = category_loss(&mut g, p, &prep, &c0).unwrap();
        assert_eq!(g.value(t).item(), g.value(u).item());

        let c = LossConfig::default();
        let one = g.leaf(Tensor::new(vec![1, h, w], vals.clone()).unwrap());
        let l1 = total_loss(&mut g, one, core::slice::from_ref(&prep), &c).unwrap();
        let mut two_vals = vals.clone();
        two_vals.extend_from_slice(&vals);
        let two = g.leaf(Tensor::new(vec![2, h, w], two_vals).unwrap());
        let prep2 = PreparedBags { category: 2, ..prep.clone() };
        let l2 = total_loss(&mut g, two, &[prep, prep2], &c).unwrap();
        let (a, b) = (g.value(l1.total).item(), g.value(l2.total).item());
        assert!((2.0 * a - b).abs() < 1e-12);
    }

    #[test]
    fn pixel_bce_of_perfect_prediction_is_small() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let l = pixel_bce(&mut g, p, &[1.0, 0.0], 1e-7).unwrap();
        assert!(g.value(l).item() < 1e-6);
        let q = g.leaf(Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap());
        let l = pixel_bce(&mut g, q, &[1.0, 0.0], 1e-7).unwrap();
        assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
    }
}
