//! Augmented-Lagrangian sparsity controller.
//!
//! The penalty `l1 * (s - t) + l2 * (s - t)^2` is minimized over the gate
//! parameters while the multipliers follow plain gradient ascent on the same
//! expression. `s` is the expected sparsity ratio and `t` the warm-up
//! scheduled target.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub lambda1: f64,
    pub lambda2: f64,
    pub target_final: f64,
    pub warmup_epochs: f64,
    pub multiplier_lr: f64,
}

impl ControllerState {
    pub fn new(target_final: f64, warmup_epochs: f64, multiplier_lr: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&target_final) {
            return Err(Error::Config(format!("target sparsity {target_final} outside [0, 1)")));
        }
        if !(warmup_epochs > 0.0) {
            return Err(Error::Config(format!("warmup_epochs must be positive, got {warmup_epochs}")));
        }
        if !(multiplier_lr > 0.0) {
            return Err(Error::Config(format!("multiplier lr must be positive, got {multiplier_lr}")));
        }
        Ok(ControllerState {
            lambda1: 0.0,
            lambda2: 0.0,
            target_final,
            warmup_epochs,
            multiplier_lr,
        })
    }

    /// Linear ramp from 0 to the final target over the warm-up epochs.
    pub fn scheduled_target(&self, epoch_progress: f64) -> f64 {
        (epoch_progress.max(0.0) / self.warmup_epochs).min(1.0) * self.target_final
    }

    pub fn penalty(&self, s_hat: f64, t_now: f64) -> f64 {
        let v = s_hat - t_now;
        self.lambda1 * v + self.lambda2 * v * v
    }

    /// Differentiable penalty; the multipliers enter as constants.
    pub fn regularizer(&self, g: &mut Graph, s_hat: Var, t_now: f64) -> Result<Var> {
        let v = g.add_scalar(s_hat, -t_now)?;
        let lin = g.mul_scalar(v, self.lambda1)?;
        let sq = g.mul(v, v)?;
        let quad = g.mul_scalar(sq, self.lambda2)?;
        Ok(g.add(lin, quad)?)
    }

    /// One ascent step on both multipliers from the detached expected
    /// sparsity. `lambda2` stays nonnegative.
    pub fn ascend_multipliers(&mut self, s_hat: f64, t_now: f64) {
        let v = s_hat - t_now;
        self.lambda1 += self.multiplier_lr * v;
        self.lambda2 = (self.lambda2 + self.multiplier_lr * v * v).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn state() -> ControllerState {
        ControllerState::new(0.5, 5.0, 1.0).unwrap()
    }

    #[test]
    fn warmup_ramp() {
        let s = state();
        assert_eq!(s.scheduled_target(0.0), 0.0);
        assert_eq!(s.scheduled_target(2.5), 0.25);
        assert_eq!(s.scheduled_target(5.0), 0.5);
        assert_eq!(s.scheduled_target(9.0), 0.5);
    }

    #[test]
    fn penalty_examples() {
        let mut s = state();
        assert_eq!(s.penalty(0.3, 0.3), 0.0);
        s.lambda1 = 2.0;
        s.lambda2 = 10.0;
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.4)).unwrap();
        let r = s.regularizer(&mut g, x, 0.3).unwrap();
        assert!((g.value(r).item() - 0.3).abs() < 1e-12);
        // d/ds = l1 + 2 l2 (s - t) = 2 + 2
        let grads = g.backward(r).unwrap();
        assert!((grads.wrt(x).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ascent_examples() {
        let mut s = state();
        s.ascend_multipliers(0.5, 0.5);
        assert_eq!((s.lambda1, s.lambda2), (0.0, 0.0));
        s.ascend_multipliers(0.7, 0.5);
        assert!((s.lambda1 - 0.2).abs() < 1e-15);
        assert!((s.lambda2 - 0.04).abs() < 1e-15);
    }

    #[test]
    fn constant_violation_grows_linearly() {
        let mut s = ControllerState::new(0.5, 5.0, 0.1).unwrap();
        for k in 1..=50 {
            s.ascend_multipliers(0.2, 0.5);
            assert!((s.lambda1 - (-0.03 * k as f64)).abs() < 1e-12);
            assert!((s.lambda2 - 0.009 * k as f64).abs() < 1e-12);
        }
        assert!(s.lambda1 < 0.0, "lambda1 may go negative");
    }

    #[test]
    fn rejects_bad_config() {
        assert!(ControllerState::new(1.0, 5.0, 0.1).is_err());
        assert!(ControllerState::new(0.5, 0.0, 0.1).is_err());
        assert!(ControllerState::new(0.5, 5.0, 0.0).is_err());
    }
}
