//! Built-in numerical checks run by `tightbox selftest`.
//!
//! The gradient suite compares reverse-mode gradients of every graph op and
//! loss term against central finite differences. The smooth-maximum suite
//! checks the bounds and monotonicity of the two smooth maxima on random
//! vectors.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tightbox_core::milloss::{self, smooth_max_segments, smooth_max_with_grad, PreparedBags};
use tightbox_core::segmodel::{forward, Image};
use tightbox_core::{AngleSet, BagReduce, BagScheme, BoxLabel, CategoryBags, Graph, LossConfig, ModelKind, ModelParams, Tensor, UnaryKind, Var};

use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Allowed `|autodiff − fd| / max(|autodiff|, |fd|, GRAD_FLOOR)`.
pub const GRAD_TOL: f64 = 1e-5;
/// Magnitude below which gradient errors are measured absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub instances: usize,
    /// Worst error (gradient checks) or number of violations (properties).
    pub worst: f64,
    pub passed: bool,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "{status} {:<28} n={:<6} worst={:.3e}", self.name, self.instances, self.worst)
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;

struct Instance {
    inputs: Vec<Tensor>,
    build: Build,
}

fn weighted_value(inst: &Instance, inputs: &[Tensor], weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = (inst.build)(&mut g, &vars)?;
    Ok(g.value(y).data().iter().zip(weights).map(|(a, b)| a * b).sum())
}

/// Worst relative gradient error of `Σ w · build(inputs)` over every input element.
fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = (inst.build)(&mut g, &vars)?;
    let weights: Vec<f64> = (0..g.value(y).len()).map(|_| rng.random_range(0.5..1.5)).collect();
    let w = g.constant(Tensor::new(g.shape(y).to_vec(), weights.clone())?);
    let prod = g.mul(y, w)?;
    let root = g.sum(prod, None)?;
    g.backward(root)?;
    let mut worst: f64 = 0.0;
    let mut inputs = inst.inputs.clone();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (i, &a) in analytic.iter().enumerate() {
            let x0 = inputs[k].data()[i];
            inputs[k].data_mut()[i] = x0 + FD_STEP;
            let up = weighted_value(inst, &inputs, &weights)?;
            inputs[k].data_mut()[i] = x0 - FD_STEP;
            let down = weighted_value(inst, &inputs, &weights)?;
            inputs[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("non-empty shape")
}

/// Values in `[lo, hi]` with magnitude at least `gap`, so kinks at 0 are avoided.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, gap, hi);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random_bool(0.5) {
            *v = -*v
        }
    });
    t
}

/// A random permutation of well-separated values, so each maximum is unique
/// by a margin far above the finite-difference step.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|k| k as f64 * 0.05 + rng.random_range(0.0..0.01)).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).expect("non-empty shape")
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    match rng.random_range(0..3) {
        0 => vec![rng.random_range(1..7)],
        1 => vec![rng.random_range(1..4), rng.random_range(1..5)],
        _ => vec![rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4)],
    }
}

fn uniform_any(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let shape = random_shape(rng);
    uniform(rng, &shape, lo, hi)
}

fn away_any(rng: &mut ChaCha8Rng, gap: f64, hi: f64) -> Tensor {
    let shape = random_shape(rng);
    away_from_zero(rng, &shape, gap, hi)
}

fn random_offsets(rng: &mut ChaCha8Rng, n_seg: usize, max_len: usize) -> Arc<[usize]> {
    let mut offs = vec![0];
    for _ in 0..n_seg {
        let last = *offs.last().unwrap();
        offs.push(last + rng.random_range(1..=max_len));
    }
    offs.into()
}

fn random_boxes(rng: &mut ChaCha8Rng, categories: usize, h: usize, w: usize) -> Vec<BoxLabel> {
    let mut boxes = Vec::new();
    for c in 1..=categories {
        for _ in 0..rng.random_range(1..=2) {
            let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
            let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
            boxes.push(BoxLabel::new(x0, y0, x1, y1, c));
        }
    }
    boxes
}

fn random_scheme(rng: &mut ChaCha8Rng) -> BagScheme {
    if rng.random_bool(0.3) {
        BagScheme::Baseline
    } else {
        let t = [10.0, 20.0, 30.0, 45.0][rng.random_range(0..4)];
        BagScheme::Generalized { angles: AngleSet::new(-t, t, t).expect("valid") }
    }
}

type Generator = fn(&mut ChaCha8Rng) -> Instance;

fn binary(f: fn(&mut Graph, Var, Var) -> std::result::Result<Var, tightbox_core::GradError>, rng: &mut ChaCha8Rng, positive_rhs: bool) -> Instance {
    let shape = random_shape(rng);
    let a = uniform(rng, &shape, -2.0, 2.0);
    let b_shape = if rng.random_bool(0.25) { vec![] } else { shape };
    let b = if positive_rhs { away_from_zero(rng, &b_shape, 0.5, 2.0) } else { uniform(rng, &b_shape, -2.0, 2.0) };
    let b = if b_shape.is_empty() { Tensor::scalar(b.data()[0]) } else { b };
    let swap = rng.random_bool(0.5) && !positive_rhs;
    let inputs = if swap { vec![b, a] } else { vec![a, b] };
    Instance { inputs, build: Box::new(move |g, v| Ok(f(g, v[0], v[1])?)) }
}

fn unary(f: fn(&mut Graph, Var) -> Var, input: Tensor) -> Instance {
    Instance { inputs: vec![input], build: Box::new(move |g, v| Ok(f(g, v[0]))) }
}

fn smooth_max_case(rng: &mut ChaCha8Rng, reduce: BagReduce, alpha: f64) -> Instance {
    let n_seg = rng.random_range(1..5);
    let offsets = random_offsets(rng, n_seg, 5);
    let n = *offsets.last().unwrap();
    let lo = if rng.random_bool(0.2) { -6.0 } else { 0.0 };
    Instance {
        inputs: vec![uniform(rng, &[n], lo, 1.0)],
        build: Box::new(move |g, v| Ok(smooth_max_segments(g, v[0], &offsets, reduce, Some(alpha))?)),
    }
}

fn bag_values(rng: &mut ChaCha8Rng) -> (Option<Tensor>, Option<Tensor>) {
    let which = rng.random_range(0..3);
    let draw = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(1..6);
        uniform(rng, &[n], 0.05, 0.95)
    };
    let pos = (which != 1).then(|| draw(rng));
    let neg = (which != 0).then(|| draw(rng));
    (pos, neg)
}

fn unary_case(rng: &mut ChaCha8Rng, kind: UnaryKind) -> Instance {
    let (pos, neg) = bag_values(rng);
    let cfg = LossConfig { unary_kind: kind, beta: rng.random_range(0.0..1.0), gamma: rng.random_range(0.0..3.0), ..LossConfig::default() };
    let has_pos = pos.is_some();
    let inputs: Vec<Tensor> = pos.into_iter().chain(neg).collect();
    Instance {
        build: Box::new(move |g, v| {
            let (p, n) = match (has_pos, v.len()) {
                (true, 2) => (Some(v[0]), Some(v[1])),
                (true, _) => (Some(v[0]), None),
                (false, _) => (None, Some(v[0])),
            };
            Ok(match cfg.unary_kind {
                UnaryKind::Ce => milloss::unary_ce(g, p, n, &cfg)?,
                UnaryKind::Focal => milloss::unary_focal(g, p, n, &cfg)?,
            })
        }),
        inputs,
    }
}

fn total_loss_case(rng: &mut ChaCha8Rng) -> Instance {
    let (h, w) = (6, 6);
    let c = rng.random_range(1..=2);
    let boxes = random_boxes(rng, c, h, w);
    let scheme = random_scheme(rng);
    let bags: Vec<PreparedBags> = (1..=c)
        .map(|k| PreparedBags::new(&CategoryBags::build(&boxes, k, h, w, &scheme).expect("valid boxes"), w))
        .collect();
    let reduce = [BagReduce::ExactMax, BagReduce::AlphaSoftmax, BagReduce::AlphaQuasimax][rng.random_range(0..3)];
    let cfg = LossConfig {
        bag_reduce: reduce,
        alpha: (reduce != BagReduce::ExactMax).then_some([4.0, 6.0, 8.0][rng.random_range(0..3)]),
        unary_kind: if rng.random_bool(0.5) { UnaryKind::Ce } else { UnaryKind::Focal },
        ..LossConfig::default()
    };
    // well-separated probabilities keep exact-max bags away from ties
    let mut probs = separated(rng, &[c, h, w]);
    let top = probs.data().iter().cloned().fold(0.0, f64::max);
    probs.data_mut().iter_mut().for_each(|v| *v = 0.05 + 0.9 * *v / top);
    Instance { inputs: vec![probs], build: Box::new(move |g, v| Ok(milloss::total_loss(g, v[0], &bags, &cfg)?.total)) }
}

fn model_case(rng: &mut ChaCha8Rng) -> Instance {
    let (h, w) = (5, 6);
    let kind = if rng.random_bool(0.5) { ModelKind::TinyConv } else { ModelKind::DirectLogit };
    let image = Image::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()).expect("pixels in range");
    let mut params = ModelParams::init(kind, 2, h, w, rng.random()).expect("valid model");
    while !clear_of_kinks(&params, &image) {
        params = ModelParams::init(kind, 2, h, w, rng.random()).expect("valid model");
    }
    let inputs: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    Instance {
        inputs,
        build: Box::new(move |g, v| {
            let probs = forward(g, &params, v, &image)?;
            let first = milloss::channels(g, probs)?[0];
            Ok(milloss::pairwise_smooth(g, first)?)
        }),
    }
}

/// True when no hidden pre-activation of a tiny-conv model is within reach of
/// the ReLU kink for a finite-difference step.
fn clear_of_kinks(params: &ModelParams, image: &Image) -> bool {
    let ModelParams::TinyConv { layers, .. } = params else {
        return true;
    };
    let mut g = Graph::new();
    let mut x = g.constant(Tensor::new(vec![1, image.height, image.width], image.pixels.clone()).expect("image shape"));
    for layer in &layers[..layers.len() - 1] {
        let k = g.constant(layer.kernel.clone());
        let b = g.constant(layer.bias.clone());
        let pre = g.conv2d(x, k, b).expect("layer shapes");
        if g.value(pre).data().iter().any(|v| v.abs() < 1e-3) {
            return false;
        }
        x = g.relu(pre);
    }
    true
}

fn conv_case(rng: &mut ChaCha8Rng) -> Instance {
    let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
    let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
    let k = if rng.random_bool(0.7) { 3 } else { 1 };
    Instance {
        inputs: vec![uniform(rng, &[ci, h, w], -1.0, 1.0), uniform(rng, &[co, ci, k, k], -1.0, 1.0), uniform(rng, &[co], -1.0, 1.0)],
        build: Box::new(|g, v| Ok(g.conv2d(v[0], v[1], v[2])?)),
    }
}

/// Every gradient case: name and instance generator.
fn gradient_cases() -> Vec<(&'static str, Generator)> {
    vec![
        ("add", |r| binary(Graph::add, r, false)),
        ("sub", |r| binary(Graph::sub, r, false)),
        ("mul", |r| binary(Graph::mul, r, false)),
        ("div", |r| binary(Graph::div, r, true)),
        ("neg", |r| unary(Graph::neg, uniform_any(r, -2.0, 2.0))),
        ("exp", |r| unary(Graph::exp, uniform_any(r, -2.0, 2.0))),
        ("log", |r| {
            let x = uniform_any(r, 0.2, 3.0);
            Instance { inputs: vec![x], build: Box::new(|g, v| Ok(g.log(v[0])?)) }
        }),
        ("sigmoid", |r| unary(Graph::sigmoid, uniform_any(r, -4.0, 4.0))),
        ("square", |r| unary(Graph::square, uniform_any(r, -2.0, 2.0))),
        ("relu", |r| unary(Graph::relu, away_any(r, 0.05, 2.0))),
        ("powf", |r| {
            let p = r.random_range(0.5..3.0);
            let x = uniform_any(r, 0.2, 2.0);
            Instance { inputs: vec![x], build: Box::new(move |g, v| Ok(g.powf(v[0], p)?)) }
        }),
        ("clamp", |r| {
            let mut x = away_any(r, 0.02, 1.0);
            // keep clear of the clamp edges at ±0.5
            x.data_mut().iter_mut().for_each(|v| {
                if (v.abs() - 0.5).abs() < 0.02 {
                    *v *= 1.1
                }
            });
            Instance { inputs: vec![x], build: Box::new(|g, v| Ok(g.clamp(v[0], -0.5, 0.5))) }
        }),
        ("reshape", |r| {
            let x = uniform(r, &[2, 3], -1.0, 1.0);
            Instance { inputs: vec![x], build: Box::new(|g, v| Ok(g.reshape(v[0], &[3, 2])?)) }
        }),
        ("sum", |r| {
            let shape = random_shape(r);
            let axis = r.random_range(0..=shape.len());
            let x = uniform(r, &shape, -1.0, 1.0);
            Instance { inputs: vec![x], build: Box::new(move |g, v| Ok(g.sum(v[0], (axis < g.shape(v[0]).len()).then_some(axis))?)) }
        }),
        ("mean", |r| {
            let shape = random_shape(r);
            let axis = r.random_range(0..=shape.len());
            let x = uniform(r, &shape, -1.0, 1.0);
            Instance { inputs: vec![x], build: Box::new(move |g, v| Ok(g.mean(v[0], (axis < g.shape(v[0]).len()).then_some(axis))?)) }
        }),
        ("max_reduce", |r| {
            let shape = random_shape(r);
            let axis = r.random_range(0..=shape.len());
            let x = separated(r, &shape);
            Instance { inputs: vec![x], build: Box::new(move |g, v| Ok(g.max_reduce(v[0], (axis < g.shape(v[0]).len()).then_some(axis))?)) }
        }),
        ("gather", |r| {
            let shape = random_shape(r);
            let n: usize = shape.iter().product();
            let idx: Arc<[usize]> = (0..r.random_range(1..9)).map(|_| r.random_range(0..n)).collect();
            Instance { inputs: vec![uniform(r, &shape, -1.0, 1.0)], build: Box::new(move |g, v| Ok(g.gather(v[0], idx.clone())?)) }
        }),
        ("segment_sum", |r| {
            let n_seg = r.random_range(1..5);
            let offs = random_offsets(r, n_seg, 4);
            let n = *offs.last().unwrap();
            Instance { inputs: vec![uniform(r, &[n], -1.0, 1.0)], build: Box::new(move |g, v| Ok(g.segment_sum(v[0], offs.clone())?)) }
        }),
        ("segment_max", |r| {
            let n_seg = r.random_range(1..5);
            let offs = random_offsets(r, n_seg, 4);
            let n = *offs.last().unwrap();
            Instance { inputs: vec![separated(r, &[n])], build: Box::new(move |g, v| Ok(g.segment_max(v[0], offs.clone())?)) }
        }),
        ("segment_expand", |r| {
            let n_seg = r.random_range(1..5);
            let offs = random_offsets(r, n_seg, 4);
            let n_seg = offs.len() - 1;
            Instance { inputs: vec![uniform(r, &[n_seg], -1.0, 1.0)], build: Box::new(move |g, v| Ok(g.segment_expand(v[0], offs.clone())?)) }
        }),
        ("conv2d", conv_case),
        ("unary_ce", |r| unary_case(r, UnaryKind::Ce)),
        ("unary_focal", |r| unary_case(r, UnaryKind::Focal)),
        ("pairwise", |r| {
            let x = uniform(r, &[6, 6], 0.0, 1.0);
            Instance { inputs: vec![x], build: Box::new(|g, v| Ok(milloss::pairwise_smooth(g, v[0])?)) }
        }),
        ("softmax_a4", |r| smooth_max_case(r, BagReduce::AlphaSoftmax, 4.0)),
        ("softmax_a6", |r| smooth_max_case(r, BagReduce::AlphaSoftmax, 6.0)),
        ("softmax_a8", |r| smooth_max_case(r, BagReduce::AlphaSoftmax, 8.0)),
        ("quasimax_a4", |r| smooth_max_case(r, BagReduce::AlphaQuasimax, 4.0)),
        ("quasimax_a6", |r| smooth_max_case(r, BagReduce::AlphaQuasimax, 6.0)),
        ("quasimax_a8", |r| smooth_max_case(r, BagReduce::AlphaQuasimax, 8.0)),
        ("total_loss", total_loss_case),
        ("model_forward", model_case),
    ]
}

/// Runs `instances` random checks of every gradient case.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (k, (name, gen)) in gradient_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let inst = gen(&mut rng);
            worst = worst.max(check_instance(&inst, &mut rng)?);
        }
        out.push(CheckOutcome { name: name.into(), instances, worst, passed: worst <= GRAD_TOL });
    }
    Ok(out)
}

fn random_vector(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(2..12);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn distinct(xs: &[f64]) -> bool {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[1] - w[0] > 1e-9)
}

/// Smooth-maximum properties on `n` random vectors in `[0, 1]^k`.
///
/// α-softmax partials are `w_i (1 + α (x_i − S))` and go negative for
/// entries below `S − 1/α`, so positivity is checked for α-quasimax only,
/// and for α-softmax only where `x_i > S − 1/α` (where the sign is forced).
pub fn smooth_max_suite(n: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = [
        "quasimax_below_max",
        "closer_at_alpha8",
        "softmax_small_alpha_mean",
        "quasimax_partials_positive",
        "softmax_partials_sign",
        "max_entry_largest_partial",
        "quasimax_equal_pair_exact",
    ];
    let mut violations = [0usize; 7];
    for _ in 0..n {
        let x = random_vector(&mut rng);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let mut gaps = Vec::new();
        for alpha in [4.0, 8.0] {
            let (q, dq) = smooth_max_with_grad(&x, BagReduce::AlphaQuasimax, Some(alpha))?;
            let (s, ds) = smooth_max_with_grad(&x, BagReduce::AlphaSoftmax, Some(alpha))?;
            violations[0] += (q > max) as usize;
            violations[3] += dq.iter().any(|&d| !(d > 0.0)) as usize;
            let forced = x.iter().zip(&ds).any(|(&xi, &d)| xi > s - 1.0 / alpha && !(d > 0.0));
            violations[4] += forced as usize;
            let imax = x.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            if distinct(&x) {
                violations[5] += (0..x.len()).any(|i| i != imax && !(ds[imax] > ds[i])) as usize;
            }
            gaps.push(((max - s).abs(), (max - q).abs()));
        }
        if distinct(&x) {
            violations[1] += (gaps[1].0 > gaps[0].0 || gaps[1].1 > gaps[0].1) as usize;
        }
        let (s0, _) = smooth_max_with_grad(&x, BagReduce::AlphaSoftmax, Some(1e-6))?;
        violations[2] += ((s0 - mean).abs() > 1e-4) as usize;
        let v = x[0];
        let alpha = rng.random_range(0.5..16.0);
        let (q2, _) = smooth_max_with_grad(&[v, v], BagReduce::AlphaQuasimax, Some(alpha))?;
        violations[6] += (q2 != v) as usize;
    }
    Ok(names
        .iter()
        .zip(violations)
        .map(|(name, v)| CheckOutcome { name: name.to_string(), instances: n, worst: v as f64, passed: v == 0 })
        .collect())
}
