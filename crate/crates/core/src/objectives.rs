//! Task losses: additive angular margin softmax and binary cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Margin and scale of the AAM-softmax head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AamParams {
    pub margin: f64,
    pub scale: f64,
}

impl Default for AamParams {
    fn default() -> Self {
        AamParams {
            margin: 0.2,
            scale: 32.0,
        }
    }
}

impl AamParams {
    pub fn new(margin: f64, scale: f64) -> Result<Self> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::Config(format!("AAM margin {margin} outside [0, pi/2)")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("AAM scale must be positive, got {scale}")));
        }
        Ok(AamParams { margin, scale })
    }
}

/// Row-wise L2 normalization of a 2-D node. The norm is floored at 1e-12
/// instead of adding an epsilon, so scaling by a power of two is exact.
pub fn l2_normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let rows = g.shape(x)[0];
    let sq = g.mul(x, x)?;
    let ss = g.sum_axis(sq, 1)?;
    let norm = g.sqrt(ss)?;
    let norm = g.clamp(norm, 1e-12, f64::INFINITY)?;
    let norm = g.reshape(norm, &[rows, 1])?;
    Ok(g.div(x, norm)?)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Config(format!("label {y} out of range for {classes} classes")));
        }
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::new([labels.len(), classes], data)?)
}

/// Mean AAM-softmax loss of `embeddings [B, D]` against the class matrix
/// `weight [C, D]`.
pub fn aam_loss(g: &mut Graph, embeddings: Var, weight: Var, labels: &[usize], params: AamParams) -> Result<Var> {
    let (es, ws) = (g.shape(embeddings).to_vec(), g.shape(weight).to_vec());
    if es.len() != 2 || ws.len() != 2 || es[1] != ws[1] {
        return Err(Error::Config(format!(
            "embedding shape {es:?} does not match class matrix {ws:?}"
        )));
    }
    if labels.len() != es[0] {
        return Err(Error::Config(format!("{} labels for a batch of {}", labels.len(), es[0])));
    }
    let batch = es[0];
    let onehot = g.constant(one_hot(labels, ws[0])?)?;
    let xn = l2_normalize_rows(g, embeddings)?;
    let wn = l2_normalize_rows(g, weight)?;
    let wt = g.transpose(wn, 0, 1)?;
    let cos = g.matmul(xn, wt)?;

    // target cosine, then cos(theta + m) through the angle-sum identity
    let masked = g.mul(cos, onehot)?;
    let ct = g.sum_axis(masked, 1)?;
    let c2 = g.mul(ct, ct)?;
    let one_minus = g.mul_scalar(c2, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let one_minus = g.clamp(one_minus, 0.0, 1.0)?;
    let sin = g.sqrt(one_minus)?;
    let a = g.mul_scalar(ct, params.margin.cos())?;
    let b = g.mul_scalar(sin, params.margin.sin())?;
    let ctm = g.sub(a, b)?;
    let delta = g.sub(ctm, ct)?;
    let delta = g.reshape(delta, &[batch, 1])?;
    let delta = g.mul(delta, onehot)?;
    let logits = g.add(cos, delta)?;
    let logits = g.mul_scalar(logits, params.scale)?;

    let logp = g.log_softmax(logits)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum(picked)?;
    Ok(g.mul_scalar(total, -1.0 / batch as f64)?)
}

/// Mean binary cross-entropy of `logits [B]`; `true` is the positive
/// (bona fide) class. Evaluated as softplus(-y * logit) with y in {-1, +1}.
pub fn bce_loss(g: &mut Graph, logits: Var, labels: &[bool]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape != [labels.len()] {
        return Err(Error::Config(format!("logits {shape:?} for {} labels", labels.len())));
    }
    let signs = Tensor::from_vec(labels.iter().map(|&y| if y { -1.0 } else { 1.0 }).collect());
    let signs = g.constant(signs)?;
    let z = g.mul(logits, signs)?;
    let l = g.softplus(z)?;
    Ok(g.mean(l)?)
}

/// Fraction of logits whose sign agrees with the label.
pub fn binary_accuracy(logits: &[f64], labels: &[bool]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let hits = logits.iter().zip(labels).filter(|(&s, &y)| (s > 0.0) == y).count();
    hits as f64 / logits.len() as f64
}
