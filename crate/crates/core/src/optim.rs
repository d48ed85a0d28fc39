//! Bias-corrected Adam.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;
use crate::ndgrad::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("non-finite gradient at tensor {tensor}, element {index}")]
    NonFinite { tensor: usize, index: usize },
    #[error("gradient layout does not match the parameters")]
    Layout,
    #[error("invalid optimizer configuration: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps_adam: 1e-8, batch_size: 4, iterations: 2000, seed: 0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(OptimError::Config("lr must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(OptimError::Config("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.eps_adam > 0.0) {
            return Err(OptimError::Config("eps_adam must be positive"));
        }
        if self.batch_size == 0 {
            return Err(OptimError::Config("batch_size must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f64>> = params.into_iter().map(|p| alloc::vec![0.0; p.len()]).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

/// One Adam update of every parameter tensor. Nothing is modified when a
/// gradient is non-finite.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut AdamState, cfg: &OptimConfig) -> Result<(), OptimError> {
    if params.len() != grads.len() || state.m.len() != grads.len() {
        return Err(OptimError::Layout);
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[k].len() != g.len() {
            return Err(OptimError::Layout);
        }
        if let Some(index) = g.iter().position(|x| !x.is_finite()) {
            return Err(OptimError::NonFinite { tensor: k, index });
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - math::powf(cfg.beta1, t);
    let bc2 = 1.0 - math::powf(cfg.beta2, t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= cfg.lr * mhat / (math::sqrt(vhat) + cfg.eps_adam);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn defaults() {
        let c = OptimConfig::default();
        assert_eq!((c.lr, c.beta1, c.beta2), (1e-4, 0.9, 0.99));
        assert_eq!((c.batch_size, c.iterations), (4, 2000));
    }

    #[test]
    fn zero_gradient_from_rest_changes_nothing() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut st, &OptimConfig::default()).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = Tensor::vector(vec![0.0]);
        let cfg = OptimConfig::default();
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[vec![1.0]], &mut st, &cfg).unwrap();
        let (m1, v1) = (st.m[0][0], st.v[0][0]);
        adam_step(&mut [&mut p], &[vec![0.0]], &mut st, &cfg).unwrap();
        assert!((st.m[0][0] - 0.9 * m1).abs() < 1e-15);
        assert!((st.v[0][0] - 0.99 * v1).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Tensor::vector(vec![3.0]);
        let cfg = OptimConfig { lr: 0.0, ..OptimConfig::default() };
        let mut st = AdamState::new([&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[vec![0.7]], &mut st, &cfg).unwrap();
        }
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn constant_gradient_matches_closed_form() {
        // With a constant gradient g the moments are m_t = g(1-b1^t), v_t = g²(1-b2^t),
        // so each bias-corrected step is exactly lr·g/(|g| + eps).
        let cfg = OptimConfig { lr: 0.01, ..OptimConfig::default() };
        let g = 0.37;
        let mut p = Tensor::vector(vec![1.0]);
        let mut st = AdamState::new([&p]);
        let mut reference = 1.0;
        for _ in 0..50 {
            adam_step(&mut [&mut p], &[vec![g]], &mut st, &cfg).unwrap();
            reference -= cfg.lr * g / (g + cfg.eps_adam);
        }
        assert!((p.data()[0] - reference).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut st = AdamState::new([&p]);
        let err = adam_step(&mut [&mut p], &[vec![0.1, f64::NAN]], &mut st, &OptimConfig::default());
        assert_eq!(err, Err(OptimError::NonFinite { tensor: 0, index: 1 }));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(st.t, 0);
    }
}
