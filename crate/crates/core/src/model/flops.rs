//! Analytic FLOPs for one utterance.
//!
//! Matmuls and convolutions cost 2 per multiply-accumulate. Elementwise
//! costs: bias add 1, residual add 1, attention scale 1, gelu 8,
//! softmax 5, layer norm 7. Gate multiplies and the task head are not
//! counted, so an unpruned compacted model costs the same as the original.

use super::{LayerDims, ModelConfig};
use crate::error::{Error, Result};

pub(crate) const GELU: u64 = 8;
pub(crate) const SOFTMAX: u64 = 5;
pub(crate) const LAYER_NORM: u64 = 7;

pub(crate) fn count(cfg: &ModelConfig, dims: &LayerDims, input_len: usize) -> Result<u64> {
    let t_out = cfg
        .frames_after_conv(input_len)
        .ok_or_else(|| Error::Model(format!("{input_len} frames too short for the conv stack")))?;
    let mut total = 0u64;
    let mut len = input_len as u64;
    for (l, spec) in cfg.conv.iter().enumerate() {
        len = (len - spec.kernel as u64) / spec.stride as u64 + 1;
        let c = dims.conv[l] as u64;
        let cin = dims.conv_in(cfg, l) as u64;
        total += 2 * len * c * cin * spec.kernel as u64 + len * c + GELU * len * c;
    }
    let t = t_out as u64;
    let d = cfg.d_model as u64;
    let dh = cfg.d_head as u64;
    total += t * d; // positions
    for i in 0..cfg.num_layers {
        let h = dims.heads[i] as u64;
        if h == 0 {
            total += t * d;
        } else {
            let hd = h * dh;
            total += LAYER_NORM * t * d;
            total += 3 * (2 * t * d * hd + t * hd);
            total += 2 * h * t * t * dh + h * t * t + SOFTMAX * h * t * t;
            total += 2 * h * t * t * dh;
            total += 2 * t * hd * d + t * d + t * d;
        }
        let f = dims.ffn[i] as u64;
        if f == 0 {
            total += t * d;
        } else {
            total += LAYER_NORM * t * d;
            total += 2 * t * d * f + t * f + GELU * t * f;
            total += 2 * t * f * d + t * d + t * d;
        }
    }
    let layers = cfg.num_layers as u64 + 1;
    let c = cfg.pooling_dim as u64;
    let hp = cfg.pooling_heads as u64;
    let e = cfg.embedding_dim as u64;
    total += 2 * (SOFTMAX * layers + 2 * layers * t * d);
    total += 2 * (2 * t * d * c + t * c);
    total += 2 * t * c * hp + t * hp + SOFTMAX * hp * t;
    total += 2 * hp * t * c;
    total += 2 * hp * c * e + e;
    Ok(total)
}
