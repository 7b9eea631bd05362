//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of the reverse pass it is checking.

use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Gradients at or below this magnitude on both sides count as zero. Biases
/// feeding a softmax have identically zero gradient, and their central
/// differences are pure rounding noise.
pub const ZERO_GRAD: f64 = 1e-7;

/// Per-input comparison of analytic and numerical gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max|analytic - numeric| / max|numeric|` for each input.
    pub rel_err: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares `backward` against central differences with step `h` for the
/// scalar function `f` of `inputs`.
pub fn check<F, E>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck, E>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    g.set_check_finite(true);
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>, TensorError>>()?;
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let eval = |ins: &[Tensor]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vs = ins
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>, TensorError>>()?;
        let r = f(&mut g, &vs)?;
        Ok(g.value(r).item())
    };

    let mut rel_err = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for j in 0..numeric.len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let analytic_max = analytic.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        if scale <= ZERO_GRAD && analytic_max <= ZERO_GRAD {
            rel_err.push(0.0);
            continue;
        }
        let scale = scale.max(ZERO_GRAD);
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        rel_err.push(diff / scale);
    }
    Ok(GradCheck { rel_err })
}
