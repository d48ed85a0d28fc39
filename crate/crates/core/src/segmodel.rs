//! Per-pixel multi-label predictors.
//!
//! Both models end in a sigmoid, producing a `[C, H, W]` map of independent
//! per-category probabilities.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::ndgrad::{GradError, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("image is {got_h}x{got_w} but the model expects {want_h}x{want_w}")]
    ImageSize { got_h: usize, got_w: usize, want_h: usize, want_w: usize },
    #[error("image pixels must be finite and in [0, 1]")]
    BadPixels,
    #[error("expected {want} bound parameters, got {got}")]
    Binding { want: usize, got: usize },
    #[error("model needs at least one category and a non-empty image")]
    Degenerate,
}

/// Grayscale image in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, ModelError> {
        if height * width != pixels.len() || pixels.is_empty() {
            return Err(ModelError::Degenerate);
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(ModelError::BadPixels);
        }
        Ok(Self { height, width, pixels })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// A free logit per pixel and category; the image is ignored.
    DirectLogit,
    /// Three same-size 3×3 convolutions, channels 1 → 8 → 8 → C, ReLU between.
    TinyConv,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DirectLogit => "direct-logit",
            ModelKind::TinyConv => "tiny-conv",
        }
    }
}

pub const TINY_CONV_HIDDEN: usize = 8;
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[out, in, 3, 3]`
    pub kernel: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    DirectLogit { logits: Tensor },
    TinyConv { categories: usize, layers: Vec<ConvLayer> },
}

impl ModelParams {
    /// Deterministic initialization: zero logits, or conv weights drawn from
    /// `U(−s, s)` with `s = sqrt(1 / (fan_in · 9))` and zero biases.
    pub fn init(kind: ModelKind, categories: usize, height: usize, width: usize, seed: u64) -> Result<Self, ModelError> {
        if categories == 0 || height == 0 || width == 0 {
            return Err(ModelError::Degenerate);
        }
        match kind {
            ModelKind::DirectLogit => Ok(Self::DirectLogit { logits: Tensor::zeros(&[categories, height, width])? }),
            ModelKind::TinyConv => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let plan = [(1, TINY_CONV_HIDDEN), (TINY_CONV_HIDDEN, TINY_CONV_HIDDEN), (TINY_CONV_HIDDEN, categories)];
                let layers = plan
                    .iter()
                    .map(|&(fan_in, out)| {
                        let s = init_scale(fan_in);
                        let n = out * fan_in * KERNEL * KERNEL;
                        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-s..s)).collect();
                        Ok(ConvLayer {
                            kernel: Tensor::new(vec![out, fan_in, KERNEL, KERNEL], w)?,
                            bias: Tensor::zeros(&[out])?,
                        })
                    })
                    .collect::<Result<Vec<_>, GradError>>()?;
                Ok(Self::TinyConv { categories, layers })
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::DirectLogit { .. } => ModelKind::DirectLogit,
            Self::TinyConv { .. } => ModelKind::TinyConv,
        }
    }

    pub fn categories(&self) -> usize {
        match self {
            Self::DirectLogit { logits } => logits.shape()[0],
            Self::TinyConv { categories, .. } => *categories,
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Self::DirectLogit { logits } => vec![logits],
            Self::TinyConv { layers, .. } => layers.iter().flat_map(|l| [&l.kernel, &l.bias]).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::DirectLogit { logits } => vec![logits],
            Self::TinyConv { layers, .. } => layers.iter_mut().flat_map(|l| [&mut l.kernel, &mut l.bias]).collect(),
        }
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers every parameter tensor as a graph leaf, in [`Self::tensors`] order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors().into_iter().map(|t| g.leaf(t.clone())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// `sqrt(1 / (fan_in · 9))`
pub fn init_scale(fan_in: usize) -> f64 {
    math::sqrt(1.0 / (fan_in * KERNEL * KERNEL) as f64)
}

/// Runs the model on `image`, returning the `[C, H, W]` probability map.
///
/// `bound` must come from [`ModelParams::bind`] on the same graph.
pub fn forward(g: &mut Graph, params: &ModelParams, bound: &[Var], image: &Image) -> Result<Var, ModelError> {
    let want = params.tensors().len();
    if bound.len() != want {
        return Err(ModelError::Binding { want, got: bound.len() });
    }
    match params {
        ModelParams::DirectLogit { logits } => {
            let (h, w) = (logits.shape()[1], logits.shape()[2]);
            if (image.height, image.width) != (h, w) {
                return Err(ModelError::ImageSize { got_h: image.height, got_w: image.width, want_h: h, want_w: w });
            }
            Ok(g.sigmoid(bound[0]))
        }
        ModelParams::TinyConv { .. } => {
            let x = g.constant(Tensor::new(vec![1, image.height, image.width], image.pixels.clone())?);
            let mut h = x;
            let n_layers = bound.len() / 2;
            for k in 0..n_layers {
                h = g.conv2d(h, bound[2 * k], bound[2 * k + 1])?;
                if k + 1 < n_layers {
                    h = g.relu(h);
                }
            }
            Ok(g.sigmoid(h))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Image {
        let px = (0..h * w).map(|k| ((k * 37) % 101) as f64 / 100.0).collect();
        Image::new(h, w, px).unwrap()
    }

    #[test]
    fn zero_models_predict_one_half() {
        let img = image(5, 7);
        for kind in [ModelKind::DirectLogit, ModelKind::TinyConv] {
            let mut p = ModelParams::init(kind, 2, 5, 7, 3).unwrap();
            for t in p.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let mut g = Graph::new();
            let b = p.bind(&mut g);
            let y = forward(&mut g, &p, &b, &img).unwrap();
            assert_eq!(g.shape(y), &[2, 5, 7]);
            assert!(g.value(y).data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(ModelKind::TinyConv, 3, 4, 4, 11).unwrap();
        let b = ModelParams::init(ModelKind::TinyConv, 3, 4, 4, 11).unwrap();
        let c = ModelParams::init(ModelKind::TinyConv, 3, 4, 4, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let d = ModelParams::init(ModelKind::DirectLogit, 1, 4, 4, 0).unwrap();
        assert!(d.tensors()[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(a.n_values(), 8 * 9 + 8 + 8 * 8 * 9 + 8 + 3 * 8 * 9 + 3);
    }

    #[test]
    fn first_layer_weight_spread() {
        // 10^4 draws from U(-s, s) have standard deviation s/sqrt(3)
        let s = init_scale(1);
        let mut draws = Vec::new();
        for seed in 0..139 {
            if let ModelParams::TinyConv { layers, .. } = ModelParams::init(ModelKind::TinyConv, 1, 3, 3, seed).unwrap() {
                draws.extend_from_slice(layers[0].kernel.data());
            }
        }
        assert!(draws.len() >= 10_000);
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let sd = math::sqrt(draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n);
        let want = s / math::sqrt(3.0);
        assert!((sd - want).abs() < 0.1 * want, "{sd} vs {want}");
        assert!(draws.iter().all(|x| x.abs() < s));
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let img = image(3, 3);
        let mut p = ModelParams::init(ModelKind::DirectLogit, 1, 3, 3, 0).unwrap();
        p.tensors_mut()[0].data_mut().copy_from_slice(&[-900.0, 900.0, 0.0, 40.0, -40.0, 1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let y = forward(&mut g, &p, &b, &img).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn size_mismatch() {
        let p = ModelParams::init(ModelKind::DirectLogit, 1, 3, 3, 0).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        assert!(matches!(forward(&mut g, &p, &b, &image(4, 3)), Err(ModelError::ImageSize { .. })));
        assert!(matches!(forward(&mut g, &p, &[], &image(3, 3)), Err(ModelError::Binding { .. })));
        assert!(Image::new(1, 2, vec![0.0, 1.5]).is_err());
    }
}
