//! Dense `f64` arrays with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value. Operations append a node and
//! return a [`Var`] handle; [`Graph::backward`] walks the tape once in reverse
//! insertion order. Binary operations accept equal shapes or a rank-0 operand
//! on either side, nothing else.
//!
//! ```
//! use tightbox_core::ndgrad::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.square(x);
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0]);
//! ```

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::math;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("empty tensor or reduction")]
    Empty,
    #[error("log of non-positive value {0}")]
    Domain(f64),
    #[error("division by zero")]
    DivisionByZero,
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("segment offsets must start at 0, increase strictly and end at {len}")]
    InvalidSegments { len: usize },
}

pub type Result<T> = core::result::Result<T, GradError>;

/// Row-major dense array. Every dimension is positive; rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || data.is_empty() {
            return Err(GradError::Empty);
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GradError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: Vec::new(), data: vec![v] }
    }

    /// One-dimensional tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self { shape: vec![data.len()], data }
    }

    pub fn full(shape: &[usize], v: f64) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    LhsScalar,
    RhsScalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Square(Var),
    Relu(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    Max(Var, Vec<usize>),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentMax(Var, Vec<usize>),
    SegmentExpand(Var, Arc<[usize]>),
    Conv2d { input: Var, kernel: Var, bias: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape of operations.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Shape bookkeeping for reducing one axis: `outer × dim × inner`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_segments(offsets: &[usize], len: usize) -> Result<()> {
    let ok = offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().unwrap() == len
        && offsets.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else if offsets.windows(2).any(|w| w[0] == w[1]) || offsets.len() < 2 {
        Err(GradError::Empty)
    } else {
        Err(GradError::InvalidSegments { len })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of the last backward root(s) with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn bcast(&self, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if sa.is_empty() {
            Ok(Bcast::LhsScalar)
        } else if sb.is_empty() {
            Ok(Bcast::RhsScalar)
        } else {
            Err(GradError::ShapeMismatch { lhs: sa.to_vec(), rhs: sb.to_vec() })
        }
    }

    fn zip(&self, a: Var, b: Var, how: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        match how {
            Bcast::Same => Tensor {
                shape: ta.shape.clone(),
                data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
            },
            Bcast::LhsScalar => {
                let x = ta.item();
                tb.map(|y| f(x, y))
            }
            Bcast::RhsScalar => {
                let y = tb.item();
                ta.map(|x| f(x, y))
            }
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(Var, Var, Bcast) -> Op) -> Result<Var> {
        let how = self.bcast(a, b)?;
        let out = self.zip(a, b, how, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op(a, b, how), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise quotient; any zero divisor is an error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data.contains(&0.0) {
            return Err(GradError::DivisionByZero);
        }
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, math::exp, Op::Exp(a))
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data.iter().find(|&&x| !(x > 0.0)) {
            return Err(GradError::Domain(bad));
        }
        Ok(self.unary(a, math::ln, Op::Log(a)))
    }

    /// Logistic function. Outputs are kept inside the open unit interval even
    /// where `f64` would round to 0 or 1.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        const HI: f64 = 1.0 - f64::EPSILON / 2.0;
        self.unary(a, |x| math::sigmoid(x).clamp(f64::MIN_POSITIVE, HI), Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// `a^p` for a constant exponent; inputs must be positive unless `p` is 0, 1 or 2.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if p != 0.0 && p != 1.0 && p != 2.0 {
            if let Some(&bad) = self.value(a).data.iter().find(|&&x| !(x > 0.0)) {
                return Err(GradError::Domain(bad));
            }
        }
        Ok(self.unary(a, |x| if p == 0.0 { 1.0 } else { math::powf(x, p) }, Op::Powf(a, p)))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the value was clipped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(a).data.clone();
        let t = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn check_axis(&self, a: Var, axis: Option<usize>) -> Result<()> {
        let rank = self.value(a).rank();
        match axis {
            Some(axis) if axis >= rank => Err(GradError::InvalidAxis { axis, rank }),
            _ => Ok(()),
        }
    }

    fn reduced_shape(&self, a: Var, axis: Option<usize>) -> Vec<usize> {
        match axis {
            None => Vec::new(),
            Some(k) => {
                let mut s = self.shape(a).to_vec();
                s.remove(k);
                s
            }
        }
    }

    fn reduce_sum(&self, a: Var, axis: Option<usize>) -> Vec<f64> {
        let t = self.value(a);
        match axis {
            None => vec![t.data.iter().sum()],
            Some(k) => {
                let (outer, dim, inner) = axis_split(&t.shape, k);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let row = &t.data[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                }
                out
            }
        }
    }

    /// Sum over one axis, or over everything when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let data = self.reduce_sum(a, axis);
        let t = Tensor { shape: self.reduced_shape(a, axis), data };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Sum(a, axis), rg))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let n = match axis {
            None => self.value(a).len(),
            Some(k) => self.shape(a)[k],
        } as f64;
        let data = self.reduce_sum(a, axis).into_iter().map(|s| s / n).collect();
        let t = Tensor { shape: self.reduced_shape(a, axis), data };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Mean(a, axis), rg))
    }

    /// Maximum over one axis (or everything). The backward pass routes the
    /// gradient to the first maximal element of each group only.
    pub fn max_reduce(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.check_axis(a, axis)?;
        let t = self.value(a);
        let (outer, dim, inner) = match axis {
            None => (1, t.len(), 1),
            Some(k) => axis_split(&t.shape, k),
        };
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * dim * inner + i;
                for d in 1..dim {
                    let idx = (o * dim + d) * inner + i;
                    if t.data[idx] > t.data[best] {
                        best = idx;
                    }
                }
                data.push(t.data[best]);
                argmax.push(best);
            }
        }
        let t = Tensor { shape: self.reduced_shape(a, axis), data };
        let rg = self.rg(a);
        Ok(self.push(t, Op::Max(a, argmax), rg))
    }

    /// Picks flat elements of `a` into a new 1-D tensor (indices may repeat).
    pub fn gather(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var> {
        if indices.is_empty() {
            return Err(GradError::Empty);
        }
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices.iter() {
            data.push(*src.get(i).ok_or(GradError::IndexOutOfBounds { index: i, len: src.len() })?);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::Gather(a, indices), rg))
    }

    fn segment_input(&self, a: Var, offsets: &[usize]) -> Result<()> {
        let t = self.value(a);
        if t.rank() != 1 {
            return Err(GradError::ShapeMismatch { lhs: t.shape.clone(), rhs: vec![t.len()] });
        }
        check_segments(offsets, t.len())
    }

    /// Sums consecutive runs of a 1-D tensor; run `s` is `offsets[s]..offsets[s+1]`.
    pub fn segment_sum(&mut self, a: Var, offsets: Arc<[usize]>) -> Result<Var> {
        self.segment_input(a, &offsets)?;
        let src = &self.value(a).data;
        let data = offsets.windows(2).map(|w| src[w[0]..w[1]].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::SegmentSum(a, offsets), rg))
    }

    /// Maximum of each run, first maximum wins ties.
    pub fn segment_max(&mut self, a: Var, offsets: Arc<[usize]>) -> Result<Var> {
        self.segment_input(a, &offsets)?;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(offsets.len() - 1);
        let mut argmax = Vec::with_capacity(offsets.len() - 1);
        for w in offsets.windows(2) {
            let mut best = w[0];
            for i in w[0] + 1..w[1] {
                if src[i] > src[best] {
                    best = i;
                }
            }
            data.push(src[best]);
            argmax.push(best);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::SegmentMax(a, argmax), rg))
    }

    /// Repeats segment value `s` over every position of run `s`.
    pub fn segment_expand(&mut self, a: Var, offsets: Arc<[usize]>) -> Result<Var> {
        let t = self.value(a);
        let n_seg = offsets.len().saturating_sub(1);
        if t.rank() != 1 || t.len() != n_seg {
            return Err(GradError::ShapeMismatch { lhs: t.shape.clone(), rhs: vec![n_seg] });
        }
        let total = *offsets.last().unwrap_or(&0);
        check_segments(&offsets, total)?;
        let mut data = Vec::with_capacity(total);
        for (w, &v) in offsets.windows(2).zip(&t.data) {
            data.extend(core::iter::repeat_n(v, w[1] - w[0]));
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::vector(data), Op::SegmentExpand(a, offsets), rg))
    }

    /// Same-size 2-D convolution (cross-correlation) with zero padding.
    ///
    /// `input` is `[in, H, W]`, `kernel` is `[out, in, k, k]` with odd `k`,
    /// `bias` is `[out]`; the result is `[out, H, W]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (si, sk, sb) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let bad = || GradError::ShapeMismatch { lhs: si.to_vec(), rhs: sk.to_vec() };
        if si.len() != 3 || sk.len() != 4 || sb.len() != 1 {
            return Err(bad());
        }
        let (ci, h, w) = (si[0], si[1], si[2]);
        let (co, kin, k) = (sk[0], sk[1], sk[2]);
        if kin != ci || sk[3] != k || k % 2 == 0 || sb[0] != co {
            return Err(bad());
        }
        let x = &self.value(input).data;
        let kw = &self.value(kernel).data;
        let b = &self.value(bias).data;
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            let plane = &mut out[o * h * w..(o + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..ci {
                let xin = &x[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kw[((o * ci + c) * k + ky) * k + kx];
                        conv_tap(plane, xin, h, w, ky as isize - (k / 2) as isize, kx as isize - (k / 2) as isize, wv);
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(Tensor { shape: vec![co, h, w], data: out }, Op::Conv2d { input, kernel, bias }, rg))
    }

    /// Accumulates `d root / d v` into every gradient-carrying ancestor of `root`.
    ///
    /// Gradients from repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(GradError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &gout, &mut grads);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += g),
                None => node.grad = Some(gout),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value.data;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
            }
        };
        let val = |v: Var| &self.nodes[v.0].value.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, how) | Op::Sub(a, b, how) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                binary_backward(&mut acc, *a, *b, *how, gout, |_, g| g, |_, g| sign * g);
            }
            Op::Mul(a, b, how) => {
                let (va, vb) = (val(*a), val(*b));
                binary_backward(
                    &mut acc,
                    *a,
                    *b,
                    *how,
                    gout,
                    |k, g| g * pick(vb, *how, Side::Rhs, k),
                    |k, g| g * pick(va, *how, Side::Lhs, k),
                );
            }
            Op::Div(a, b, how) => {
                let (va, vb) = (val(*a), val(*b));
                binary_backward(
                    &mut acc,
                    *a,
                    *b,
                    *how,
                    gout,
                    |k, g| g / pick(vb, *how, Side::Rhs, k),
                    |k, g| {
                        let y = pick(vb, *how, Side::Rhs, k);
                        -g * pick(va, *how, Side::Lhs, k) / (y * y)
                    },
                );
            }
            Op::Neg(a) => acc(*a, &mut |ga| ga.iter_mut().zip(gout).for_each(|(d, g)| *d -= g)),
            Op::Exp(a) => acc(*a, &mut |ga| each3(ga, gout, out, |g, y| g * y)),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| each3(ga, gout, x, |g, x| g / x));
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| each3(ga, gout, out, |g, s| g * s * (1.0 - s))),
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| each3(ga, gout, x, |g, x| 2.0 * g * x));
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |ga| each3(ga, gout, x, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Powf(a, p) => {
                let (x, p) = (val(*a), *p);
                acc(*a, &mut |ga| {
                    each3(ga, gout, x, |g, x| if p == 0.0 { 0.0 } else { g * p * math::powf(x, p - 1.0) })
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (x, lo, hi) = (val(*a), *lo, *hi);
                acc(*a, &mut |ga| each3(ga, gout, x, |g, x| if x >= lo && x <= hi { g } else { 0.0 }));
            }
            Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(gout).for_each(|(d, g)| *d += g)),
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let shape = &self.nodes[a.0].value.shape;
                let (outer, dim, inner) = match axis {
                    None => (1, self.nodes[a.0].value.len(), 1),
                    Some(k) => axis_split(shape, *k),
                };
                let scale = if matches!(node.op, Op::Mean(..)) { 1.0 / dim as f64 } else { 1.0 };
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for d in 0..dim {
                            for n in 0..inner {
                                ga[(o * dim + d) * inner + n] += scale * gout[o * inner + n];
                            }
                        }
                    }
                });
            }
            Op::Max(a, argmax) | Op::SegmentMax(a, argmax) => acc(*a, &mut |ga| {
                for (&idx, &g) in argmax.iter().zip(gout) {
                    ga[idx] += g;
                }
            }),
            Op::Gather(a, idx) => acc(*a, &mut |ga| {
                for (&j, &g) in idx.iter().zip(gout) {
                    ga[j] += g;
                }
            }),
            Op::SegmentSum(a, offsets) => acc(*a, &mut |ga| {
                for (w, &g) in offsets.windows(2).zip(gout) {
                    ga[w[0]..w[1]].iter_mut().for_each(|d| *d += g);
                }
            }),
            Op::SegmentExpand(a, offsets) => acc(*a, &mut |ga| {
                for (s, w) in offsets.windows(2).enumerate() {
                    ga[s] += gout[w[0]..w[1]].iter().sum::<f64>();
                }
            }),
            Op::Conv2d { input, kernel, bias } => {
                let si = &self.nodes[input.0].value.shape;
                let sk = &self.nodes[kernel.0].value.shape;
                let (ci, h, w) = (si[0], si[1], si[2]);
                let (co, k) = (sk[0], sk[2]);
                let half = (k / 2) as isize;
                let (x, kw) = (val(*input), val(*kernel));
                acc(*bias, &mut |gb| {
                    for o in 0..co {
                        gb[o] += gout[o * h * w..(o + 1) * h * w].iter().sum::<f64>();
                    }
                });
                acc(*kernel, &mut |gk| {
                    for o in 0..co {
                        let go = &gout[o * h * w..(o + 1) * h * w];
                        for c in 0..ci {
                            let xin = &x[c * h * w..(c + 1) * h * w];
                            for ky in 0..k {
                                for kx in 0..k {
                                    gk[((o * ci + c) * k + ky) * k + kx] +=
                                        conv_tap_dot(go, xin, h, w, ky as isize - half, kx as isize - half);
                                }
                            }
                        }
                    }
                });
                acc(*input, &mut |gi| {
                    for o in 0..co {
                        let go = &gout[o * h * w..(o + 1) * h * w];
                        for c in 0..ci {
                            let gin = &mut gi[c * h * w..(c + 1) * h * w];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wv = kw[((o * ci + c) * k + ky) * k + kx];
                                    // out[y][x] += w * in[y+dy][x+dx]  =>  gin[y+dy][x+dx] += w * go[y][x]
                                    conv_tap(gin, go, h, w, half - ky as isize, half - kx as isize, wv);
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

/// `dst[y][x] += wv * src[y+dy][x+dx]` over the valid region.
fn conv_tap(dst: &mut [f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize, wv: f64) {
    let (y_lo, y_hi) = valid_range(h, dy);
    let (x_lo, x_hi) = valid_range(w, dx);
    if y_lo == y_hi || x_lo == x_hi {
        return;
    }
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * w + x_lo..y * w + x_hi];
        let s = &src[sy * w + (x_lo as isize + dx) as usize..sy * w + (x_hi as isize + dx) as usize];
        for (a, &b) in d.iter_mut().zip(s) {
            *a += wv * b;
        }
    }
}

/// `Σ go[y][x] · src[y+dy][x+dx]` over the valid region.
fn conv_tap_dot(go: &[f64], src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> f64 {
    let (y_lo, y_hi) = valid_range(h, dy);
    let (x_lo, x_hi) = valid_range(w, dx);
    if y_lo == y_hi || x_lo == x_hi {
        return 0.0;
    }
    let mut total = 0.0;
    for y in y_lo..y_hi {
        let sy = (y as isize + dy) as usize;
        let g = &go[y * w + x_lo..y * w + x_hi];
        let s = &src[sy * w + (x_lo as isize + dx) as usize..sy * w + (x_hi as isize + dx) as usize];
        total += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
    }
    total
}

/// Output positions `p` with `0 <= p + d < n`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

#[derive(Clone, Copy)]
enum Side {
    Lhs,
    Rhs,
}

fn pick(v: &[f64], how: Bcast, side: Side, k: usize) -> f64 {
    match (how, side) {
        (Bcast::LhsScalar, Side::Lhs) | (Bcast::RhsScalar, Side::Rhs) => v[0],
        _ => v[k],
    }
}

fn each3(ga: &mut [f64], gout: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &x) in ga.iter_mut().zip(gout).zip(x) {
        *d += f(g, x);
    }
}

fn binary_backward(
    acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    a: Var,
    b: Var,
    how: Bcast,
    gout: &[f64],
    da: impl Fn(usize, f64) -> f64,
    db: impl Fn(usize, f64) -> f64,
) {
    acc(a, &mut |ga| {
        if how == Bcast::LhsScalar {
            ga[0] += gout.iter().enumerate().map(|(k, &g)| da(k, g)).sum::<f64>();
        } else {
            ga.iter_mut().zip(gout).enumerate().for_each(|(k, (d, &g))| *d += da(k, g));
        }
    });
    acc(b, &mut |gb| {
        if how == Bcast::RhsScalar {
            gb[0] += gout.iter().enumerate().map(|(k, &g)| db(k, g)).sum::<f64>();
        } else {
            gb.iter_mut().zip(gout).enumerate().for_each(|(k, (d, &g))| *d += db(k, g));
        }
    });
}
