//! Hard Concrete gates: a stretched, clamped binary-concrete variable that
//! puts finite probability mass exactly on 0 and 1 while staying
//! reparameterizable in `log_alpha`.

use crate::tensor::{Graph, Result as TensorResult, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("uniform draw {0} outside the open interval (0, 1)")]
    UniformOutOfRange(f64),
    #[error("invalid gate shape: beta={beta}, gamma={gamma}, zeta={zeta}")]
    InvalidShape { beta: f64, gamma: f64, zeta: f64 },
}

/// Temperature and stretch interval shared by every gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateShape {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for GateShape {
    fn default() -> Self {
        GateShape {
            beta: 2.0 / 3.0,
            gamma: -0.1,
            zeta: 1.1,
        }
    }
}

impl GateShape {
    pub fn new(beta: f64, gamma: f64, zeta: f64) -> Result<Self, GateError> {
        let ok = beta > 0.0 && beta <= 1.0 && gamma < 0.0 && zeta > 1.0;
        if !ok {
            return Err(GateError::InvalidShape { beta, gamma, zeta });
        }
        Ok(GateShape { beta, gamma, zeta })
    }

    pub fn span(&self) -> f64 {
        self.zeta - self.gamma
    }

    /// `beta * ln(-gamma / zeta)`, the shift in the closed-form P(z != 0).
    fn log_ratio(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardConcreteParams {
    pub log_alpha: f64,
    pub shape: GateShape,
}

impl HardConcreteParams {
    pub fn new(log_alpha: f64) -> Self {
        HardConcreteParams {
            log_alpha,
            shape: GateShape::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSample {
    pub z: f64,
    pub uniform_draw: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reparameterized draw for the uniform `u`.
pub fn sample(params: HardConcreteParams, u: f64) -> Result<GateSample, GateError> {
    if !(u > 0.0 && u < 1.0) {
        return Err(GateError::UniformOutOfRange(u));
    }
    let sh = params.shape;
    let s = sigmoid(((u.ln() - (1.0 - u).ln()) + params.log_alpha) / sh.beta);
    let z = (s * sh.span() + sh.gamma).clamp(0.0, 1.0);
    Ok(GateSample { z, uniform_draw: u })
}

/// Closed-form `P(z != 0)`.
pub fn prob_nonzero(params: HardConcreteParams) -> f64 {
    sigmoid(params.log_alpha - params.shape.log_ratio())
}

/// Noise-free gate used for evaluation.
pub fn deterministic_gate(params: HardConcreteParams) -> f64 {
    let sh = params.shape;
    (sigmoid(params.log_alpha) * sh.span() + sh.gamma).clamp(0.0, 1.0)
}

/// `E[z]` from the exact atoms at 0 and 1 plus Simpson quadrature of the
/// continuous part, integrated in logit-uniform coordinates.
pub fn expected_value(params: HardConcreteParams) -> f64 {
    let sh = params.shape;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let s_lo = -sh.gamma / sh.span();
    let s_hi = (1.0 - sh.gamma) / sh.span();
    // z(x) hits 0 at x_lo and 1 at x_hi, with x = logit(u)
    let x_lo = sh.beta * logit(s_lo) - params.log_alpha;
    let x_hi = sh.beta * logit(s_hi) - params.log_alpha;
    let atom_one = 1.0 - sigmoid(x_hi);
    let integrand = |x: f64| {
        let z = sigmoid((x + params.log_alpha) / sh.beta) * sh.span() + sh.gamma;
        let p = sigmoid(x);
        z * p * (1.0 - p)
    };
    let n = 2000;
    let h = (x_hi - x_lo) / n as f64;
    let mut acc = integrand(x_lo) + integrand(x_hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * integrand(x_lo + i as f64 * h);
    }
    atom_one + acc * h / 3.0
}

// -------------------------------------------------------------------------
// Vectorized, differentiable forms over a `log_alpha` vector
// -------------------------------------------------------------------------

/// Differentiable samples for a vector of gates with per-gate draws `u`.
pub fn sample_var(g: &mut Graph, shape: GateShape, log_alpha: Var, u: &[f64]) -> TensorResult<Var> {
    let logits: Vec<f64> = u.iter().map(|&u| u.ln() - (1.0 - u).ln()).collect();
    let noise = g.constant(Tensor::new(g.shape(log_alpha).to_vec(), logits)?)?;
    let x = g.add(log_alpha, noise)?;
    let x = g.mul_scalar(x, 1.0 / shape.beta)?;
    let s = g.sigmoid(x)?;
    stretch_and_clamp(g, shape, s)
}

pub fn deterministic_var(g: &mut Graph, shape: GateShape, log_alpha: Var) -> TensorResult<Var> {
    let s = g.sigmoid(log_alpha)?;
    stretch_and_clamp(g, shape, s)
}

pub fn prob_nonzero_var(g: &mut Graph, shape: GateShape, log_alpha: Var) -> TensorResult<Var> {
    let x = g.add_scalar(log_alpha, -shape.log_ratio())?;
    g.sigmoid(x)
}

fn stretch_and_clamp(g: &mut Graph, shape: GateShape, s: Var) -> TensorResult<Var> {
    let y = g.mul_scalar(s, shape.span())?;
    let y = g.add_scalar(y, shape.gamma)?;
    g.clamp(y, 0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_sample_is_half() {
        let s = sample(HardConcreteParams::new(0.0), 0.5).unwrap();
        assert!((s.z - 0.5).abs() < 1e-15);
    }

    #[test]
    fn very_negative_log_alpha_closes_gate() {
        for u in [1e-9, 0.3, 0.5, 0.999_999] {
            assert_eq!(sample(HardConcreteParams::new(f64::NEG_INFINITY), u).unwrap().z, 0.0);
            assert_eq!(sample(HardConcreteParams::new(-1e4), u).unwrap().z, 0.0);
        }
    }

    #[test]
    fn sample_matches_scalar_recomputation() {
        // log_alpha = 2, u = 0.9, default shape
        let (u, la, beta, gamma, zeta): (f64, f64, f64, f64, f64) = (0.9, 2.0, 2.0 / 3.0, -0.1, 1.1);
        let arg = ((u / (1.0 - u)).ln() + la) / beta;
        let s = 1.0 / (1.0 + (-arg).exp());
        let expected = (s * (zeta - gamma) + gamma).min(1.0).max(0.0);
        let got = sample(HardConcreteParams::new(la), u).unwrap().z;
        assert!((got - expected).abs() < 1e-15);
        // this draw saturates: s is about 0.998, so the stretch exceeds 1
        assert_eq!(got, 1.0);
    }

    #[test]
    fn rejects_closed_interval_draws() {
        let p = HardConcreteParams::new(0.0);
        assert!(matches!(sample(p, 0.0), Err(GateError::UniformOutOfRange(_))));
        assert!(matches!(sample(p, 1.0), Err(GateError::UniformOutOfRange(_))));
        assert!(sample(p, f64::NAN).is_err());
    }

    #[test]
    fn prob_nonzero_reference_value_and_limits() {
        let p = prob_nonzero(HardConcreteParams::new(0.0));
        assert!((p - 0.8318).abs() < 5e-5, "{p}");
        assert_eq!(prob_nonzero(HardConcreteParams::new(f64::INFINITY)), 1.0);
        assert_eq!(prob_nonzero(HardConcreteParams::new(f64::NEG_INFINITY)), 0.0);
    }

    #[test]
    fn deterministic_gate_examples() {
        assert!((deterministic_gate(HardConcreteParams::new(0.0)) - 0.5).abs() < 1e-15);
        assert_eq!(deterministic_gate(HardConcreteParams::new(-20.0)), 0.0);
        let s: f64 = 1.0 / (1.0 + (-1.5f64).exp());
        let expected = (s * 1.2 - 0.1).clamp(0.0, 1.0);
        let got = deterministic_gate(HardConcreteParams::new(1.5));
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn deterministic_gate_is_monotone() {
        let mut prev = 0.0;
        for i in -400..=400 {
            let v = deterministic_gate(HardConcreteParams::new(i as f64 * 0.02));
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn shape_validation() {
        assert!(GateShape::new(2.0 / 3.0, -0.1, 1.1).is_ok());
        assert!(GateShape::new(1.5, -0.1, 1.1).is_err());
        assert!(GateShape::new(0.5, 0.1, 1.1).is_err());
        assert!(GateShape::new(0.5, -0.1, 0.9).is_err());
    }

    #[test]
    fn expected_value_limits() {
        assert!(expected_value(HardConcreteParams::new(30.0)) > 1.0 - 1e-9);
        assert!(expected_value(HardConcreteParams::new(-30.0)) < 1e-9);
        // symmetric shape around 0.5 at log_alpha = 0
        assert!((expected_value(HardConcreteParams::new(0.0)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn vectorized_forms_match_scalar_forms() {
        let las = [-3.0, -1.0, 0.0, 1.0, 3.0];
        let us = [0.1, 0.4, 0.5, 0.7, 0.95];
        let mut g = Graph::new();
        let la = g.param(Tensor::from_vec(las.to_vec())).unwrap();
        let shape = GateShape::default();
        let z = sample_var(&mut g, shape, la, &us).unwrap();
        let d = deterministic_var(&mut g, shape, la).unwrap();
        let p = prob_nonzero_var(&mut g, shape, la).unwrap();
        for i in 0..5 {
            let hp = HardConcreteParams::new(las[i]);
            assert!((g.value(z).data()[i] - sample(hp, us[i]).unwrap().z).abs() < 1e-14);
            assert!((g.value(d).data()[i] - deterministic_gate(hp)).abs() < 1e-14);
            assert!((g.value(p).data()[i] - prob_nonzero(hp)).abs() < 1e-14);
        }
    }
}
