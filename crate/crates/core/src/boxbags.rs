//! Tight bounding boxes and the positive/negative bags derived from them.
//!
//! A crossing line has its two endpoints on opposite sides of a box, so under
//! the tightness prior it hits the object at least once: its pixels form a
//! positive bag. Pixels away from every box of a category are negatives for
//! that category.
//!
//! Two bag definitions are provided:
//!
//! - baseline: every box row and column is a positive bag, every full image
//!   row and column that misses all boxes of the category is a negative bag;
//! - generalized: parallel crossing lines at a set of angles for both pairs of
//!   opposite sides, and one singleton negative bag per pixel outside the
//!   category's boxes.
//!
//! Angled lines are rasterized with one pixel per row (top/bottom family) or
//! per column (left/right family), so angle 0 reproduces the baseline lines.

use alloc::collections::BTreeSet;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("box ({x0},{y0})-({x1},{y1}) has inverted corners")]
    Inverted { x0: usize, y0: usize, x1: usize, y1: usize },
    #[error("box ({x0},{y0})-({x1},{y1}) exceeds image {height}x{width}")]
    OutOfImage { x0: usize, y0: usize, x1: usize, y1: usize, height: usize, width: usize },
    #[error("category must be at least 1")]
    ZeroCategory,
    #[error("angle set ({theta1}, {theta2}, {step}) is invalid: angles must lie in (-90, 90) with theta1 <= theta2 and step > 0")]
    BadAngles { theta1: f64, theta2: f64, step: f64 },
    #[error("angle spec `{0}` is not of the form theta1:theta2:step")]
    AngleSyntax(alloc::string::String),
}

/// Axis-aligned box with inclusive pixel corners, `(x0, y0)` top-left and
/// `(x1, y1)` bottom-right, plus a 1-based category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoxLabel {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub category: usize,
}

impl BoxLabel {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize, category: usize) -> Self {
        Self { x0, y0, x1, y1, category }
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y0..=self.y1).contains(&row) && (self.x0..=self.x1).contains(&col)
    }

    /// Checks corner order, category and that the box fits in an `height × width` image.
    pub fn validate(&self, height: usize, width: usize) -> Result<(), BoxError> {
        let Self { x0, y0, x1, y1, category } = *self;
        if x0 > x1 || y0 > y1 {
            return Err(BoxError::Inverted { x0, y0, x1, y1 });
        }
        if category == 0 {
            return Err(BoxError::ZeroCategory);
        }
        if x1 >= width || y1 >= height {
            return Err(BoxError::OutOfImage { x0, y0, x1, y1, height, width });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

/// Which pair of opposite box sides a crossing line connects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    /// Endpoints on the top and bottom edges; one pixel per row.
    TopBottom,
    /// Endpoints on the left and right edges; one pixel per column.
    LeftRight,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    /// Crossing line at `angle` degrees starting at integer `offset` (column
    /// for top/bottom lines, row for left/right lines).
    Line { angle: f64, family: Family, offset: usize },
    /// Full image row that misses every box of the category.
    NegativeRow(usize),
    /// Full image column that misses every box of the category.
    NegativeColumn(usize),
    NegativePixel,
}

/// Pixels sorted by `(row, col)` and distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub pixels: Vec<Pixel>,
    pub polarity: Polarity,
    pub category: usize,
    pub provenance: Provenance,
}

impl Bag {
    fn new(mut pixels: Vec<Pixel>, polarity: Polarity, category: usize, provenance: Provenance) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Self { pixels, polarity, category, provenance }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Evenly spaced angles `theta1, theta1 + step, …, theta2` in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleSet {
    pub theta1: f64,
    pub theta2: f64,
    pub step: f64,
}

impl AngleSet {
    pub fn new(theta1: f64, theta2: f64, step: f64) -> Result<Self, BoxError> {
        let s = Self { theta1, theta2, step };
        s.validate()?;
        Ok(s)
    }

    /// The single angle 0: generalized bags then equal the baseline lines.
    pub fn zero() -> Self {
        Self { theta1: 0.0, theta2: 0.0, step: 1.0 }
    }

    pub fn validate(&self) -> Result<(), BoxError> {
        let ok = self.theta1 > -90.0
            && self.theta2 < 90.0
            && self.theta1 <= self.theta2
            && self.step > 0.0
            && self.step.is_finite();
        if ok {
            Ok(())
        } else {
            Err(BoxError::BadAngles { theta1: self.theta1, theta2: self.theta2, step: self.step })
        }
    }

    /// Parses `theta1:theta2:step`.
    pub fn parse(s: &str) -> Result<Self, BoxError> {
        let err = || BoxError::AngleSyntax(s.into());
        let mut parts = s.split(':').map(|p| p.trim().parse::<f64>());
        let (Some(Ok(a)), Some(Ok(b)), Some(Ok(c)), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(err());
        };
        Self::new(a, b, c)
    }

    pub fn angles(&self) -> Vec<f64> {
        let span = (self.theta2 - self.theta1) / self.step;
        let n = math::floor(span + 1e-9) as usize;
        (0..=n)
            .map(|k| {
                let a = self.theta1 + k as f64 * self.step;
                // snap accumulated float error back onto whole multiples
                if math::abs(a - math::round(a)) < 1e-9 {
                    math::round(a)
                } else {
                    a
                }
            })
            .collect()
    }
}

impl core::fmt::Display for AngleSet {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}:{}:{}", self.theta1, self.theta2, self.step)
    }
}

/// Bag definition used for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum BagScheme {
    Baseline,
    Generalized { angles: AngleSet },
}

/// One bag per box row and one per box column: `H + W` bags.
pub fn baseline_positive_bags(b: &BoxLabel) -> Vec<Bag> {
    let rows = (b.y0..=b.y1).map(|r| {
        let px = (b.x0..=b.x1).map(|c| Pixel::new(r, c)).collect();
        Bag::new(px, Polarity::Positive, b.category, Provenance::Line { angle: 0.0, family: Family::LeftRight, offset: r })
    });
    let cols = (b.x0..=b.x1).map(|c| {
        let px = (b.y0..=b.y1).map(|r| Pixel::new(r, c)).collect();
        Bag::new(px, Polarity::Positive, b.category, Provenance::Line { angle: 0.0, family: Family::TopBottom, offset: c })
    });
    rows.chain(cols).collect()
}

/// Full image rows and columns that intersect no box of `category`.
pub fn baseline_negative_bags(boxes: &[BoxLabel], category: usize, height: usize, width: usize) -> Vec<Bag> {
    let own: Vec<&BoxLabel> = boxes.iter().filter(|b| b.category == category).collect();
    let mut bags = Vec::new();
    for r in 0..height {
        if own.iter().all(|b| r < b.y0 || r > b.y1) {
            let px = (0..width).map(|c| Pixel::new(r, c)).collect();
            bags.push(Bag::new(px, Polarity::Negative, category, Provenance::NegativeRow(r)));
        }
    }
    for c in 0..width {
        if own.iter().all(|b| c < b.x0 || c > b.x1) {
            let px = (0..height).map(|r| Pixel::new(r, c)).collect();
            bags.push(Bag::new(px, Polarity::Negative, category, Provenance::NegativeColumn(c)));
        }
    }
    bags
}

/// Integer start offsets `s` in `[lo, hi]` with `s + shift` also in `[lo, hi]`.
fn line_offsets(lo: usize, hi: usize, shift: f64) -> impl Iterator<Item = usize> {
    const TOL: f64 = 1e-9;
    let (lo_f, hi_f) = (lo as f64, hi as f64);
    let first = math::ceil(lo_f.max(lo_f - shift) - TOL);
    let last = math::floor(hi_f.min(hi_f - shift) + TOL);
    
    if first <= last { first as usize..last as usize + 1 } else { 0..0 }
}

/// Pixels of one angled crossing line.
///
/// Top/bottom lines step through rows `y0..=y1` and place the column at
/// `round(offset + tan(angle) · (row − y0))`; left/right lines do the same
/// with rows and columns swapped.
pub fn rasterize_line(b: &BoxLabel, angle: f64, family: Family, offset: usize) -> Vec<Pixel> {
    let t = if angle == 0.0 { 0.0 } else { math::tan_deg(angle) };
    match family {
        Family::TopBottom => (0..b.height())
            .map(|k| {
                let c = math::round(offset as f64 + t * k as f64).clamp(b.x0 as f64, b.x1 as f64);
                Pixel::new(b.y0 + k, c as usize)
            })
            .collect(),
        Family::LeftRight => (0..b.width())
            .map(|k| {
                let r = math::round(offset as f64 + t * k as f64).clamp(b.y0 as f64, b.y1 as f64);
                Pixel::new(r as usize, b.x0 + k)
            })
            .collect(),
    }
}

/// Every parallel crossing line of the box at each angle, both families.
///
/// Offsets are all integers that keep both endpoints on the box edges; an
/// angle too steep for a family yields no lines from it. Lines whose pixel
/// sets coincide are kept once.
pub fn generalized_positive_bags(b: &BoxLabel, angles: &AngleSet) -> Vec<Bag> {
    let mut seen: BTreeSet<Vec<Pixel>> = BTreeSet::new();
    let mut bags = Vec::new();
    for angle in angles.angles() {
        let t = if angle == 0.0 { 0.0 } else { math::tan_deg(angle) };
        let families = [
            (Family::TopBottom, b.x0, b.x1, t * (b.height() - 1) as f64),
            (Family::LeftRight, b.y0, b.y1, t * (b.width() - 1) as f64),
        ];
        for (family, lo, hi, shift) in families {
            for offset in line_offsets(lo, hi, shift) {
                let bag = Bag::new(
                    rasterize_line(b, angle, family, offset),
                    Polarity::Positive,
                    b.category,
                    Provenance::Line { angle, family, offset },
                );
                if seen.insert(bag.pixels.clone()) {
                    bags.push(bag);
                }
            }
        }
    }
    bags
}

/// One singleton bag per pixel outside every box of `category`, row-major.
///
/// Boxes of other categories neither contribute nor shield pixels.
pub fn generalized_negative_bags(boxes: &[BoxLabel], category: usize, height: usize, width: usize) -> Vec<Bag> {
    let covered = coverage(boxes, category, height, width);
    (0..height * width)
        .filter(|&k| !covered[k])
        .map(|k| Bag::new(alloc::vec![Pixel::new(k / width, k % width)], Polarity::Negative, category, Provenance::NegativePixel))
        .collect()
}

/// Row-major mask of pixels inside any box of `category`.
pub fn coverage(boxes: &[BoxLabel], category: usize, height: usize, width: usize) -> Vec<bool> {
    let mut covered = alloc::vec![false; height * width];
    for b in boxes.iter().filter(|b| b.category == category) {
        for r in b.y0..=b.y1.min(height.saturating_sub(1)) {
            for c in b.x0..=b.x1.min(width.saturating_sub(1)) {
                covered[r * width + c] = true;
            }
        }
    }
    covered
}

/// Positive and negative bags of one category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryBags {
    pub category: usize,
    pub positives: Vec<Bag>,
    pub negatives: Vec<Bag>,
}

impl CategoryBags {
    /// Builds both bag lists for `category` under `scheme`. Boxes are validated first.
    pub fn build(
        boxes: &[BoxLabel],
        category: usize,
        height: usize,
        width: usize,
        scheme: &BagScheme,
    ) -> Result<Self, BoxError> {
        for b in boxes {
            b.validate(height, width)?;
        }
        let own = boxes.iter().filter(|b| b.category == category);
        let (positives, negatives) = match scheme {
            BagScheme::Baseline => (
                own.flat_map(baseline_positive_bags).collect(),
                baseline_negative_bags(boxes, category, height, width),
            ),
            BagScheme::Generalized { angles } => {
                angles.validate()?;
                (
                    own.flat_map(|b| generalized_positive_bags(b, angles)).collect(),
                    generalized_negative_bags(boxes, category, height, width),
                )
            }
        };
        Ok(Self { category, positives, negatives })
    }

    pub fn packed_positives(&self, width: usize) -> Option<PackedBags> {
        PackedBags::pack(&self.positives, width)
    }

    pub fn packed_negatives(&self, width: usize) -> Option<PackedBags> {
        PackedBags::pack(&self.negatives, width)
    }
}

/// Bags flattened for ragged reductions: bag `s` covers
/// `indices[offsets[s]..offsets[s + 1]]`, each index `row * width + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBags {
    pub indices: Arc<[usize]>,
    pub offsets: Arc<[usize]>,
}

impl PackedBags {
    /// `None` when there are no bags.
    pub fn pack(bags: &[Bag], width: usize) -> Option<Self> {
        if bags.is_empty() {
            return None;
        }
        let mut indices = Vec::with_capacity(bags.iter().map(Bag::len).sum());
        let mut offsets = Vec::with_capacity(bags.len() + 1);
        offsets.push(0);
        for bag in bags {
            indices.extend(bag.pixels.iter().map(|p| p.row * width + p.col));
            offsets.push(indices.len());
        }
        Some(Self { indices: indices.into(), offsets: offsets.into() })
    }

    pub fn n_bags(&self) -> usize {
        self.offsets.len() - 1
    }

    /// True when every bag holds exactly one pixel.
    pub fn all_singletons(&self) -> bool {
        self.indices.len() == self.n_bags()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn pixel_sets(bags: &[Bag]) -> BTreeSet<Vec<Pixel>> {
        bags.iter().map(|b| b.pixels.clone()).collect()
    }

    #[test]
    fn baseline_count_3x4() {
        let b = BoxLabel::new(2, 5, 5, 7, 1);
        assert_eq!((b.height(), b.width()), (3, 4));
        assert_eq!(baseline_positive_bags(&b).len(), 7);
    }

    #[test]
    fn baseline_single_pixel_box() {
        let bags = baseline_positive_bags(&BoxLabel::new(3, 3, 3, 3, 1));
        assert_eq!(bags.len(), 2);
        assert!(bags.iter().all(|b| b.pixels == vec![Pixel::new(3, 3)]));
    }

    #[test]
    fn baseline_2x2_enumeration() {
        let got = pixel_sets(&baseline_positive_bags(&BoxLabel::new(0, 0, 1, 1, 1)));
        let p = Pixel::new;
        let want: BTreeSet<Vec<Pixel>> = [
            vec![p(0, 0), p(0, 1)],
            vec![p(1, 0), p(1, 1)],
            vec![p(0, 0), p(1, 0)],
            vec![p(0, 1), p(1, 1)],
        ]
        .into_iter()
        .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn baseline_negatives() {
        assert_eq!(baseline_negative_bags(&[], 1, 5, 7).len(), 12);
        let wide = [BoxLabel::new(0, 1, 6, 2, 1)];
        let bags = baseline_negative_bags(&wide, 1, 5, 7);
        assert!(bags.iter().all(|b| !matches!(b.provenance, Provenance::NegativeRow(1 | 2))));
        assert_eq!(bags.len(), 3);
        // rows {0,1,5,6,7}, columns {0,1,6,7}
        let bags = baseline_negative_bags(&[BoxLabel::new(2, 2, 5, 4, 1)], 1, 8, 8);
        assert_eq!(bags.len(), 9);
        // other categories are ignored
        assert_eq!(baseline_negative_bags(&[BoxLabel::new(2, 2, 5, 4, 2)], 1, 8, 8).len(), 16);
    }

    #[test]
    fn generalized_zero_angle_matches_baseline() {
        for b in [BoxLabel::new(0, 0, 0, 0, 1), BoxLabel::new(3, 1, 9, 4, 1), BoxLabel::new(0, 0, 1, 5, 2)] {
            let g = generalized_positive_bags(&b, &AngleSet::zero());
            assert_eq!(pixel_sets(&g), pixel_sets(&baseline_positive_bags(&b)));
        }
    }

    #[test]
    fn one_row_box_degenerates() {
        let b = BoxLabel::new(2, 4, 9, 4, 1);
        for theta in [-60.0, 25.0, 45.0] {
            let bags = generalized_positive_bags(&b, &AngleSet::new(theta, theta, 1.0).unwrap());
            assert_eq!(bags.len(), 8);
            assert!(bags.iter().all(|bag| bag.len() == 1 && b.contains(bag.pixels[0].row, bag.pixels[0].col)));
        }
    }

    #[test]
    fn diagonal_45_on_5x5() {
        let b = BoxLabel::new(0, 0, 4, 4, 1);
        let bags = generalized_positive_bags(&b, &AngleSet::new(45.0, 45.0, 1.0).unwrap());
        // tan 45 = 1: only offset 0 fits in each family and both give the main diagonal
        assert_eq!(bags.len(), 1);
        let diag: Vec<Pixel> = (0..5).map(|i| Pixel::new(i, i)).collect();
        assert_eq!(bags[0].pixels, diag);
    }

    #[test]
    fn steep_angle_has_no_lines_in_short_box() {
        // 3 wide, 10 tall: at 60 degrees a top/bottom line drifts 15.6 columns.
        let b = BoxLabel::new(0, 0, 2, 9, 1);
        let bags = generalized_positive_bags(&b, &AngleSet::new(60.0, 60.0, 1.0).unwrap());
        assert!(bags.iter().all(|bag| matches!(bag.provenance, Provenance::Line { family: Family::LeftRight, .. })));
        // left/right lines drift tan(60)·2 ≈ 3.46 rows: offsets 0..=5
        assert_eq!(bags.len(), 6);
    }

    #[test]
    fn generalized_negatives_counts() {
        assert_eq!(generalized_negative_bags(&[], 1, 4, 4).len(), 16);
        assert!(generalized_negative_bags(&[BoxLabel::new(0, 0, 3, 3, 1)], 1, 4, 4).is_empty());
        let boxes = [BoxLabel::new(0, 0, 3, 3, 1), BoxLabel::new(2, 2, 5, 5, 1)];
        assert_eq!(generalized_negative_bags(&boxes, 1, 8, 8).len(), 36);
        // a box of another category does not shield
        let mixed = [BoxLabel::new(0, 0, 3, 3, 2)];
        assert_eq!(generalized_negative_bags(&mixed, 1, 8, 8).len(), 64);
    }

    #[test]
    fn angle_sets_are_inclusive() {
        assert_eq!(AngleSet::new(-40.0, 40.0, 20.0).unwrap().angles(), vec![-40.0, -20.0, 0.0, 20.0, 40.0]);
        assert_eq!(AngleSet::new(-60.0, 60.0, 30.0).unwrap().angles().len(), 5);
        assert_eq!(AngleSet::new(-40.0, 40.0, 10.0).unwrap().angles().len(), 9);
        assert_eq!(AngleSet::parse("-40:40:20").unwrap(), AngleSet::new(-40.0, 40.0, 20.0).unwrap());
        assert!(AngleSet::parse("-90:40:20").is_err());
        assert!(AngleSet::parse("1:2").is_err());
        assert!(AngleSet::new(10.0, -10.0, 5.0).is_err());
    }

    #[test]
    fn validation_errors() {
        assert!(matches!(BoxLabel::new(3, 0, 2, 0, 1).validate(8, 8), Err(BoxError::Inverted { .. })));
        assert!(matches!(BoxLabel::new(0, 0, 8, 0, 1).validate(8, 8), Err(BoxError::OutOfImage { .. })));
        assert_eq!(BoxLabel::new(0, 0, 0, 0, 0).validate(8, 8), Err(BoxError::ZeroCategory));
    }

    #[test]
    fn packing_offsets() {
        let bags = baseline_positive_bags(&BoxLabel::new(1, 0, 2, 0, 1));
        let p = PackedBags::pack(&bags, 4).unwrap();
        assert_eq!(&*p.offsets, &[0, 2, 3, 4]);
        assert_eq!(&*p.indices, &[1, 2, 1, 2]);
        assert!(PackedBags::pack(&[], 4).is_none());
    }

    fn arb_box() -> impl Strategy<Value = (BoxLabel, usize, usize)> {
        (1usize..24, 1usize..24, 0usize..8, 0usize..8).prop_map(|(h, w, y0, x0)| {
            (BoxLabel::new(x0, y0, x0 + w - 1, y0 + h - 1, 1), y0 + h + 3, x0 + w + 2)
        })
    }

    proptest! {
        #[test]
        fn baseline_count_is_h_plus_w(h in 1usize..=64, w in 1usize..=64) {
            let b = BoxLabel::new(0, 0, w - 1, h - 1, 1);
            prop_assert_eq!(baseline_positive_bags(&b).len(), h + w);
        }

        #[test]
        fn generalized_bags_respect_geometry((b, ih, iw) in arb_box(), theta in -80.0f64..80.0) {
            let bags = generalized_positive_bags(&b, &AngleSet::new(theta, theta, 1.0).unwrap());
            for bag in &bags {
                prop_assert!(!bag.is_empty());
                prop_assert!(bag.pixels.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(bag.pixels.iter().all(|p| b.contains(p.row, p.col)));
                match bag.provenance {
                    Provenance::Line { family: Family::TopBottom, .. } => {
                        prop_assert!(bag.pixels.iter().any(|p| p.row == b.y0));
                        prop_assert!(bag.pixels.iter().any(|p| p.row == b.y1));
                    }
                    Provenance::Line { family: Family::LeftRight, .. } => {
                        prop_assert!(bag.pixels.iter().any(|p| p.col == b.x0));
                        prop_assert!(bag.pixels.iter().any(|p| p.col == b.x1));
                    }
                    _ => prop_assert!(false, "unexpected provenance"),
                }
            }
            let neg = generalized_negative_bags(&[b], 1, ih, iw);
            prop_assert_eq!(neg.len(), ih * iw - b.area());
            prop_assert!(neg.iter().all(|n| n.len() == 1 && !b.contains(n.pixels[0].row, n.pixels[0].col)));
        }
    }
}
