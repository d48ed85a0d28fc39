//! Synthetic grayscale datasets with exact masks and tight boxes.
//!
//! Objects are ellipses, rotated rectangles or crescents (a disc with an
//! offset disc removed, so the object misses its box center). Each object
//! instance is one 4-connected component and its box is the minimal rectangle
//! around it. Pixel values are quantized to multiples of 1/255.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxbags::BoxLabel;
use crate::math;
use crate::segmodel::Image;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("infeasible dataset spec: {0}")]
    Infeasible(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Crescent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ShapeKind>,
    /// Inclusive range of objects per image.
    pub n_objects: (usize, usize),
    /// Inclusive range of the object half-extent in pixels.
    pub radius: (f64, f64),
    pub categories: usize,
    pub noise_sigma: f64,
    pub background: f64,
    /// Inclusive range of object intensities.
    pub intensity: (f64, f64),
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_train: 20,
            n_val: 5,
            height: 64,
            width: 64,
            shapes: vec![ShapeKind::Ellipse],
            n_objects: (1, 1),
            radius: (10.0, 16.0),
            categories: 1,
            noise_sigma: 0.05,
            background: 0.2,
            intensity: (0.6, 0.9),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Infeasible(m.into()));
        if self.n_train + self.n_val == 0 {
            return bad("dataset has no samples");
        }
        if self.shapes.is_empty() {
            return bad("no shape kinds");
        }
        if self.categories == 0 {
            return bad("categories must be at least 1");
        }
        if self.n_objects.0 == 0 || self.n_objects.0 > self.n_objects.1 {
            return bad("n_objects must be a non-empty range starting at 1 or more");
        }
        if !(self.radius.0 >= 1.0 && self.radius.0 <= self.radius.1) {
            return bad("radius range must start at 1 or more");
        }
        let need = 2.0 * self.radius.1 + 3.0;
        if need > self.height as f64 || need > self.width as f64 {
            return Err(SynthError::Infeasible(format!(
                "objects up to radius {} need {need} pixels but the image is {}x{}",
                self.radius.1, self.height, self.width
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.background) || !unit(self.intensity.0) || !unit(self.intensity.1) || self.intensity.0 > self.intensity.1 {
            return bad("intensities must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Object geometry in pixel-center coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Rectangle { cy: f64, cx: f64, hy: f64, hx: f64, angle: f64 },
    Crescent { cy: f64, cx: f64, r: f64, iy: f64, ix: f64, ir: f64 },
}

impl Shape {
    pub fn disc(cy: f64, cx: f64, r: f64) -> Self {
        Shape::Ellipse { cy, cx, ry: r, rx: r, angle: 0.0 }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (y, x) = (row as f64, col as f64);
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (u, v) = rotate(y - cy, x - cx, angle);
                (u / ry) * (u / ry) + (v / rx) * (v / rx) <= 1.0
            }
            Shape::Rectangle { cy, cx, hy, hx, angle } => {
                let (u, v) = rotate(y - cy, x - cx, angle);
                math::abs(u) <= hy && math::abs(v) <= hx
            }
            Shape::Crescent { cy, cx, r, iy, ix, ir } => {
                let outer = (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r;
                let inner = (y - iy) * (y - iy) + (x - ix) * (x - ix) <= ir * ir;
                outer && !inner
            }
        }
    }

    /// Row-major foreground mask.
    pub fn rasterize(&self, height: usize, width: usize) -> Vec<bool> {
        (0..height * width).map(|k| self.contains(k / width, k % width)).collect()
    }
}

fn rotate(dy: f64, dx: f64, angle: f64) -> (f64, f64) {
    let (s, c) = (math::sin(angle), math::cos(angle));
    (dy * c + dx * s, -dy * s + dx * c)
}

/// Minimal box around the foreground of a row-major mask.
pub fn tight_box_from_mask(mask: &[bool], width: usize, category: usize) -> Result<BoxLabel, SynthError> {
    let mut b: Option<BoxLabel> = None;
    for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (r, c) = (k / width, k % width);
        b = Some(match b {
            None => BoxLabel::new(c, r, c, r, category),
            Some(b) => BoxLabel::new(b.x0.min(c), b.y0.min(r), b.x1.max(c), b.y1.max(r), category),
        });
    }
    b.ok_or(SynthError::EmptyMask)
}

/// Number of 4-connected foreground components.
pub fn count_components(mask: &[bool], height: usize, width: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut n = 0;
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        n += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(k) = stack.pop() {
            let (r, c) = (k / width, k % width);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(k - width);
            }
            if r + 1 < height {
                visit(k + width);
            }
            if c > 0 {
                visit(k - 1);
            }
            if c + 1 < width {
                visit(k + 1);
            }
        }
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub image: Image,
    /// One row-major mask per category; categories may overlap.
    pub masks: Vec<Vec<bool>>,
    pub boxes: Vec<BoxLabel>,
}

impl Sample {
    pub fn categories(&self) -> usize {
        self.masks.len()
    }

    /// Masks as a `[C, H, W]` 0/1 buffer.
    pub fn mask_targets(&self) -> Vec<f64> {
        self.masks.iter().flatten().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

const MAX_ATTEMPTS: usize = 200;

fn random_shape(rng: &mut ChaCha8Rng, kind: ShapeKind, spec: &DatasetSpec) -> Shape {
    let r = if spec.radius.0 == spec.radius.1 { spec.radius.0 } else { rng.random_range(spec.radius.0..=spec.radius.1) };
    let margin = r + 1.0;
    let cy = rng.random_range(margin..=spec.height as f64 - 1.0 - margin);
    let cx = rng.random_range(margin..=spec.width as f64 - 1.0 - margin);
    match kind {
        ShapeKind::Ellipse => {
            let minor = r * rng.random_range(0.6..=1.0);
            let angle = rng.random_range(0.0..PI);
            Shape::Ellipse { cy, cx, ry: r, rx: minor, angle }
        }
        ShapeKind::Rectangle => {
            // half-diagonal stays within r
            let hy = r * rng.random_range(0.4..=0.7);
            let hx = r * rng.random_range(0.4..=0.7);
            let angle = rng.random_range(0.0..PI / 2.0);
            Shape::Rectangle { cy, cx, hy, hx, angle }
        }
        ShapeKind::Crescent => {
            let dir = rng.random_range(0.0..2.0 * PI);
            let shift = 0.45 * r;
            Shape::Crescent { cy, cx, r, iy: cy + shift * math::sin(dir), ix: cx + shift * math::cos(dir), ir: 0.8 * r }
        }
    }
}

/// Whether a candidate instance mask is acceptable next to already placed
/// instances of the same category (no overlap, no 4-adjacency).
fn separated(mask: &[bool], others: &[bool], height: usize, width: usize) -> bool {
    mask.iter().enumerate().filter(|(_, &m)| m).all(|(k, _)| {
        let (r, c) = (k / width, k % width);
        let near = [
            Some(k),
            (r > 0).then(|| k - width),
            (r + 1 < height).then(|| k + width),
            (c > 0).then(|| k - 1),
            (c + 1 < width).then(|| k + 1),
        ];
        near.iter().flatten().all(|&j| !others[j])
    })
}

fn quantize(v: f64) -> f64 {
    math::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

fn generate_sample(rng: &mut ChaCha8Rng, spec: &DatasetSpec, id: String, split: Split) -> Result<Sample, SynthError> {
    let (h, w) = (spec.height, spec.width);
    let n_obj = rng.random_range(spec.n_objects.0..=spec.n_objects.1);
    let mut masks = vec![vec![false; h * w]; spec.categories];
    let mut boxes = Vec::with_capacity(n_obj);
    let mut pixels = vec![spec.background; h * w];
    for _ in 0..n_obj {
        let category = rng.random_range(1..=spec.categories);
        let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let shape = random_shape(rng, kind, spec);
            let mask = shape.rasterize(h, w);
            if count_components(&mask, h, w) != 1 || !separated(&mask, &masks[category - 1], h, w) {
                continue;
            }
            let b = tight_box_from_mask(&mask, w, category)?;
            if kind == ShapeKind::Crescent && mask[((b.y0 + b.y1) / 2) * w + (b.x0 + b.x1) / 2] {
                continue;
            }
            placed = Some((mask, b));
            break;
        }
        let (mask, b) = placed.ok_or_else(|| {
            SynthError::Infeasible(format!("could not place object {} of {id} after {MAX_ATTEMPTS} attempts", boxes.len()))
        })?;
        let level = if spec.intensity.0 == spec.intensity.1 {
            spec.intensity.0
        } else {
            rng.random_range(spec.intensity.0..=spec.intensity.1)
        };
        for (k, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            pixels[k] = level;
            masks[category - 1][k] = true;
        }
        boxes.push(b);
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|_| SynthError::Infeasible("bad noise_sigma".into()))?;
        for p in &mut pixels {
            *p += normal.sample(rng);
        }
    }
    let pixels = pixels.into_iter().map(quantize).collect();
    let image = Image::new(h, w, pixels).map_err(|e| SynthError::Infeasible(format!("{e}")))?;
    Ok(Sample { id, split, image, masks, boxes })
}

/// Deterministic dataset: `n_train` training samples then `n_val` validation samples.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_train + spec.n_val);
    for i in 0..spec.n_train {
        out.push(generate_sample(&mut rng, spec, format!("train_{i:04}"), Split::Train)?);
    }
    for i in 0..spec.n_val {
        out.push(generate_sample(&mut rng, spec, format!("val_{i:04}"), Split::Val)?);
    }
    Ok(out)
}
