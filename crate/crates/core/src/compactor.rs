//! Gate finalization and physical removal of pruned structures.

use crate::error::{Error, Result};
use crate::fabric::{GateFabric, GateMode, GroupKind};
use crate::model::{LayerDims, ParamStore, PrunableModel};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Tolerance on realized sparsity before the cut is moved.
pub const TARGET_TOLERANCE: f64 = 0.01;
/// Maximum output discrepancy accepted by [`verify_equivalence`].
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;

/// Kept unit indices per layer plus the realized efficiency figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactionPlan {
    /// One entry per gated conv layer (all but the last).
    pub conv: Vec<Vec<usize>>,
    pub heads: Vec<Vec<usize>>,
    pub ffn: Vec<Vec<usize>>,
    pub realized_params: usize,
    pub realized_sparsity: f64,
    pub reference_len: usize,
    pub realized_flops: u64,
}

/// Binary keep flags: open iff the deterministic gate is positive. When the
/// realized sparsity misses `target` by more than [`TARGET_TOLERANCE`], the
/// gates are ranked (deterministic gate, then `log_alpha`) and the cut moves
/// to the achievable sparsity nearest the target.
pub fn binarize(fabric: &GateFabric, target: f64) -> Vec<bool> {
    let det = fabric.deterministic_gates();
    let keep: Vec<bool> = det.iter().map(|&z| z > 0.0).collect();
    if (fabric.realized_sparsity(&keep) - target).abs() <= TARGET_TOLERANCE {
        return keep;
    }
    let la = fabric.log_alpha();
    let mut order: Vec<usize> = (0..fabric.len()).collect();
    order.sort_by(|&a, &b| det[b].total_cmp(&det[a]).then(la[b].total_cmp(&la[a])).then(a.cmp(&b)));
    let mut cand = vec![false; fabric.len()];
    let mut best = (fabric.realized_sparsity(&cand) - target).abs();
    let mut best_k = 0;
    for (k, &g) in order.iter().enumerate() {
        cand[g] = true;
        let err = (fabric.realized_sparsity(&cand) - target).abs();
        if err <= best {
            best = err;
            best_k = k + 1;
        }
    }
    let mut out = vec![false; fabric.len()];
    for &g in &order[..best_k] {
        out[g] = true;
    }
    out
}

/// Turns keep flags into per-layer index lists with realized counts.
pub fn plan_from_keep(model: &PrunableModel, keep: &[bool], reference_len: usize) -> Result<CompactionPlan> {
    let fabric = gated_fabric(model)?;
    if keep.len() != fabric.len() {
        return Err(Error::Compaction(format!(
            "{} keep flags for {} gates",
            keep.len(),
            fabric.len()
        )));
    }
    let cfg = &model.config;
    let kept = |kind: GroupKind, layer: usize| -> Vec<usize> {
        let s = fabric.segment(kind, layer).expect("segment exists");
        (0..s.len).filter(|&u| keep[s.start + u]).collect()
    };
    let mut plan = CompactionPlan {
        conv: (0..cfg.gated_conv_layers()).map(|l| kept(GroupKind::ConvChannel, l)).collect(),
        heads: (0..cfg.num_layers).map(|l| kept(GroupKind::MhsaHead, l)).collect(),
        ffn: (0..cfg.num_layers).map(|l| kept(GroupKind::FfnNeuron, l)).collect(),
        realized_params: fabric.realized_remaining(keep),
        realized_sparsity: fabric.realized_sparsity(keep),
        reference_len,
        realized_flops: 0,
    };
    plan.realized_flops = model.count_flops_with(&plan_dims(model, &plan), reference_len)?;
    Ok(plan)
}

fn gated_fabric(model: &PrunableModel) -> Result<&GateFabric> {
    let f = model
        .fabric
        .as_ref()
        .ok_or_else(|| Error::Compaction("model has no gates (already compacted?)".into()))?;
    if model.dims != LayerDims::nominal(&model.config) {
        return Err(Error::Compaction("gated model must have nominal widths".into()));
    }
    Ok(f)
}

fn plan_dims(model: &PrunableModel, plan: &CompactionPlan) -> LayerDims {
    let cfg = &model.config;
    let mut conv: Vec<usize> = plan.conv.iter().map(Vec::len).collect();
    conv.push(cfg.d_model);
    LayerDims {
        conv,
        heads: plan.heads.iter().map(Vec::len).collect(),
        ffn: plan.ffn.iter().map(Vec::len).collect(),
    }
}

/// Keep flags in fabric order implied by a plan.
pub fn plan_keep(model: &PrunableModel, plan: &CompactionPlan) -> Result<Vec<bool>> {
    let fabric = gated_fabric(model)?;
    check_plan(model, plan)?;
    let mut keep = vec![false; fabric.len()];
    let lists = [
        (GroupKind::ConvChannel, &plan.conv),
        (GroupKind::MhsaHead, &plan.heads),
        (GroupKind::FfnNeuron, &plan.ffn),
    ];
    for (kind, layers) in lists {
        for (l, idx) in layers.iter().enumerate() {
            let s = fabric.segment(kind, l).expect("checked plan");
            for &u in idx {
                keep[s.start + u] = true;
            }
        }
    }
    Ok(keep)
}

fn check_plan(model: &PrunableModel, plan: &CompactionPlan) -> Result<()> {
    let cfg = &model.config;
    let bad = |m: String| Err(Error::Compaction(m));
    if plan.conv.len() != cfg.gated_conv_layers() || plan.heads.len() != cfg.num_layers || plan.ffn.len() != cfg.num_layers
    {
        return bad("plan layer counts do not match the model".into());
    }
    let check = |what: &str, l: usize, idx: &[usize], n: usize| -> Result<()> {
        if idx.windows(2).any(|w| w[0] >= w[1]) || idx.last().is_some_and(|&i| i >= n) {
            return Err(Error::Compaction(format!(
                "{what} indices of layer {l} must be sorted, unique and below {n}"
            )));
        }
        Ok(())
    };
    for (l, idx) in plan.conv.iter().enumerate() {
        check("conv", l, idx, cfg.conv[l].channels)?;
    }
    for l in 0..cfg.num_layers {
        check("head", l, &plan.heads[l], cfg.num_heads)?;
        check("ffn", l, &plan.ffn[l], cfg.ffn_dim)?;
    }
    Ok(())
}

/// Keeps `idx` along `axis`; `None` when nothing is kept.
fn select(t: &Tensor, axis: usize, idx: &[usize]) -> Option<Tensor> {
    if idx.is_empty() {
        return None;
    }
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * idx.len() * inner);
    for o in 0..outer {
        for &i in idx {
            data.extend_from_slice(&t.data()[(o * n + i) * inner..][..inner]);
        }
    }
    let mut s = shape.to_vec();
    s[axis] = idx.len();
    Some(Tensor::new(s, data).expect("selected shape"))
}

/// Column indices of the kept heads in a `[*, heads * d_head]` projection.
fn head_columns(heads: &[usize], d_head: usize) -> Vec<usize> {
    heads.iter().flat_map(|&h| h * d_head..(h + 1) * d_head).collect()
}

/// Builds the gate-free model holding only the kept structures.
pub fn compact(model: &PrunableModel, plan: &CompactionPlan) -> Result<PrunableModel> {
    gated_fabric(model)?;
    check_plan(model, plan)?;
    let cfg = &model.config;
    let last = cfg.conv.len() - 1;
    let all = |n: usize| (0..n).collect::<Vec<_>>();
    let conv_keep = |l: usize| -> Vec<usize> {
        if l < last {
            plan.conv[l].clone()
        } else {
            all(cfg.conv[l].channels)
        }
    };
    let mut store = ParamStore::new();
    for (name, t) in model.params.iter() {
        let sliced = slice_param(cfg, plan, &conv_keep, name, t)?;
        if let Some(t) = sliced {
            store.insert(name, t)?;
        }
    }
    Ok(PrunableModel {
        config: cfg.clone(),
        dims: plan_dims(model, plan),
        params: store,
        fabric: None,
    })
}

fn slice_param(
    cfg: &crate::model::ModelConfig,
    plan: &CompactionPlan,
    conv_keep: &dyn Fn(usize) -> Vec<usize>,
    name: &str,
    t: &Tensor,
) -> Result<Option<Tensor>> {
    let parts: Vec<&str> = name.split('.').collect();
    let layer = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Compaction(format!("unexpected parameter name `{name}`")))
    };
    Ok(match parts[..] {
        ["conv", l, "bias"] => select(t, 0, &conv_keep(layer(l)?)),
        ["conv", l, "weight"] => {
            let l = layer(l)?;
            let rows = select(t, 0, &conv_keep(l));
            match (rows, l) {
                (Some(r), 0) => Some(r),
                (Some(r), _) => select(&r, 1, &plan.conv[l - 1]),
                (None, _) => None,
            }
        }
        ["block", i, "attn", w] => {
            let i = layer(i)?;
            let cols = head_columns(&plan.heads[i], cfg.d_head);
            match w {
                "wq" | "wk" | "wv" => select(t, 1, &cols),
                "bq" | "bk" | "bv" => select(t, 0, &cols),
                "wo" => select(t, 0, &cols),
                _ => Some(t.clone()),
            }
        }
        ["block", i, "ffn", w] => {
            let keep = &plan.ffn[layer(i)?];
            match w {
                "w1" => select(t, 1, keep),
                "b1" => select(t, 0, keep),
                "w2" => select(t, 0, keep),
                _ => Some(t.clone()),
            }
        }
        _ => Some(t.clone()),
    })
}

/// Result of comparing a gated model under binary gates with its compacted
/// counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub inputs: usize,
    pub max_abs_diff: f64,
    pub passed: bool,
}

/// Seeded standard-normal probe inputs `[n, frames, feat_dim]`.
pub fn probe_inputs(model: &PrunableModel, n: usize, frames: usize, seed: u64) -> Tensor {
    let mut r = rng::stream_rng(seed, Domain::Probe, 0);
    let len = n * frames * model.config.feat_dim;
    let data = (0..len)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut r);
            v
        })
        .collect();
    Tensor::new([n, frames, model.config.feat_dim], data).expect("probe shape")
}

/// Max-abs embedding difference between `original` under the binary gates
/// `keep` and `compacted`, over `inputs [n, T, F]`.
pub fn verify_equivalence(
    original: &PrunableModel,
    keep: &[bool],
    compacted: &PrunableModel,
    inputs: &Tensor,
) -> Result<EquivalenceReport> {
    let gates: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let a = original.embed(inputs, GateMode::Fixed(&gates), 16)?;
    let b = compacted.embed(inputs, GateMode::Eval, 16)?;
    let diff = a
        .max_abs_diff(&b)
        .ok_or_else(|| Error::Compaction("embedding shapes differ".into()))?;
    Ok(EquivalenceReport {
        inputs: inputs.shape()[0],
        max_abs_diff: diff,
        passed: diff < EQUIVALENCE_TOLERANCE,
    })
}
