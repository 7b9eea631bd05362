//! The prunable encoder: conv front-end, pre-norm transformer blocks with
//! gated heads and FFN neurons, a multi-head layer-weighted attentive
//! pooling back-end, and a task head.

mod config;
mod flops;
mod params;

pub use config::{ConvSpec, HeadKind, LayerDims, ModelConfig, Preset};
pub use params::ParamStore;

use crate::error::{Error, Result, StageExt};
use crate::fabric::{GateFabric, GateMode, GroupKind, SharedSlice, StructuralGroup};
use crate::hard_concrete::GateShape;
use crate::rng::{self, Domain};
use crate::tensor::{Graph, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};

/// Initial `log_alpha` for every gate (P(nonzero) about 0.98).
pub const INIT_LOG_ALPHA: f64 = 2.5;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct PrunableModel {
    pub config: ModelConfig,
    pub dims: LayerDims,
    pub params: ParamStore,
    /// `None` once the model has been compacted (or was built without gates).
    pub fabric: Option<GateFabric>,
}

/// Graph handles for every parameter of one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Vec<Var>,
    pub log_alpha: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Last block output `[B, T', d_model]`.
    pub frames: Var,
    /// Pooled embedding `[B, embedding_dim]`.
    pub embedding: Var,
    /// Gate values used in this pass, if the model is gated.
    pub gates: Option<Var>,
}

impl PrunableModel {
    /// Fresh model with seeded initialization; `gated` attaches a fabric.
    pub fn new(config: ModelConfig, seed: u64, gated: bool) -> Result<Self> {
        config.validate()?;
        let dims = LayerDims::nominal(&config);
        let params = init_params(&config, seed)?;
        let mut model = PrunableModel {
            config,
            dims,
            params,
            fabric: None,
        };
        if gated {
            model.fabric = Some(model.build_fabric()?);
        }
        Ok(model)
    }

    /// Structural groups and their parameter buckets for the nominal
    /// architecture.
    fn build_fabric(&self) -> Result<GateFabric> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let last = cfg.conv.len() - 1;
        let mut groups = Vec::new();
        let mut conv_base = Vec::new();
        let mut next = 0;
        for l in 0..last {
            conv_base.push(next);
            next += cfg.conv[l].channels;
        }
        for l in 0..last {
            let c_l = cfg.conv[l].channels;
            for c in 0..c_l {
                let mut owned = 1; // bias
                if l == 0 {
                    owned += cfg.feat_dim * cfg.conv[0].kernel;
                }
                let consumer = &cfg.conv[l + 1];
                let mut shared = Vec::new();
                if l + 1 == last {
                    owned += consumer.channels * consumer.kernel;
                } else {
                    for o in 0..consumer.channels {
                        shared.push(SharedSlice {
                            partner: conv_base[l + 1] + o,
                            count: consumer.kernel,
                        });
                    }
                }
                groups.push(StructuralGroup {
                    id: groups.len(),
                    kind: GroupKind::ConvChannel,
                    layer: l,
                    unit: c,
                    owned,
                    shared,
                });
            }
        }
        let head_owned = 3 * d * cfg.d_head + 3 * cfg.d_head + cfg.d_head * d;
        for layer in 0..cfg.num_layers {
            for unit in 0..cfg.num_heads {
                groups.push(StructuralGroup {
                    id: groups.len(),
                    kind: GroupKind::MhsaHead,
                    layer,
                    unit,
                    owned: head_owned,
                    shared: vec![],
                });
            }
            for unit in 0..cfg.ffn_dim {
                groups.push(StructuralGroup {
                    id: groups.len(),
                    kind: GroupKind::FfnNeuron,
                    layer,
                    unit,
                    owned: 2 * d + 1,
                    shared: vec![],
                });
            }
        }
        let mut fixed = cfg.positions() * d + d; // positions + last conv bias
        if last == 0 {
            fixed += cfg.feat_dim * cfg.conv[0].kernel * d;
        }
        fixed += cfg.num_layers * (6 * d); // two norms, attention out bias, ffn out bias
        fixed += pooling_params(cfg) + head_params(cfg);
        GateFabric::new(groups, fixed, self.count_params(), GateShape::default(), INIT_LOG_ALPHA)
    }

    pub fn is_gated(&self) -> bool {
        self.fabric.is_some()
    }

    /// Exact number of model weights (gate parameters excluded).
    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Analytic FLOPs of one embedding extraction at `input_len` frames.
    pub fn count_flops(&self, input_len: usize) -> Result<u64> {
        flops::count(&self.config, &self.dims, input_len)
    }

    /// FLOPs of this architecture with different per-layer widths.
    pub fn count_flops_with(&self, dims: &LayerDims, input_len: usize) -> Result<u64> {
        flops::count(&self.config, dims, input_len)
    }

    /// Registers every parameter (and the gate vector) on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let params = self
            .params
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let log_alpha = match &self.fabric {
            Some(f) if !f.is_empty() => Some(g.leaf(Tensor::from_vec(f.log_alpha().to_vec()), trainable)?),
            _ => None,
        };
        Ok(Bound { params, log_alpha })
    }

    fn var(&self, bound: &Bound, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| bound.params[i])
            .ok_or_else(|| Error::Model(format!("missing parameter `{name}`")))
    }

    /// Full forward pass on `input [B, T, feat_dim]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, input: &Tensor, mode: GateMode<'_>) -> Result<ForwardOutput> {
        let x = g.constant(input.clone())?;
        self.forward_var(g, bound, x, mode)
    }

    /// As [`forward`](Self::forward), with the input already on the graph.
    pub fn forward_var(&self, g: &mut Graph, bound: &Bound, x: Var, mode: GateMode<'_>) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let input = g.value(x);
        let shape = input.shape().to_vec();
        if shape.len() != 3 || shape[2] != cfg.feat_dim {
            return Err(Error::Model(format!(
                "input shape {shape:?} does not match [B, T, {}]",
                cfg.feat_dim
            )));
        }
        if !input.is_finite() {
            return Err(Error::Model("non-finite input".into()));
        }
        let (batch, frames) = (shape[0], shape[1]);
        let out_len = cfg
            .frames_after_conv(frames)
            .ok_or_else(|| Error::Model(format!("{frames} frames too short for the conv stack")))?;
        if out_len > cfg.positions() {
            return Err(Error::Model(format!(
                "{frames} frames exceed max_frames {}",
                cfg.max_frames
            )));
        }
        let gates = match (&self.fabric, bound.log_alpha) {
            (Some(f), Some(la)) => Some(f.gate_values(g, la, mode)?),
            _ => None,
        };

        // conv front-end
        let mut h = Some(x);
        let mut len = frames;
        for (l, spec) in cfg.conv.iter().enumerate() {
            let st = || format!("conv layer {l}");
            len = (len - spec.kernel) / spec.stride + 1;
            let width = self.dims.conv[l];
            if width == 0 {
                h = None;
                continue;
            }
            let b = self.var(bound, &format!("conv.{l}.bias"))?;
            let pre = match h {
                Some(prev) => {
                    let w = self.var(bound, &format!("conv.{l}.weight"))?;
                    let y = g.conv1d(prev, w, spec.stride).stage(st)?;
                    g.add(y, b).stage(st)?
                }
                None => {
                    // every input channel was removed: only the bias survives
                    let zeros = g.constant(Tensor::zeros([batch, len, width]))?;
                    g.add(zeros, b).stage(st)?
                }
            };
            let mut act = g.gelu(pre).stage(st)?;
            if let (Some(f), Some(z)) = (&self.fabric, gates) {
                if l + 1 < cfg.conv.len() {
                    act = f.apply_segment(g, act, z, GroupKind::ConvChannel, l, 2)?;
                }
            }
            h = Some(act);
        }
        let h = h.ok_or_else(|| Error::Model("conv stack produced no channels".into()))?;
        let pos = self.var(bound, "pos")?;
        let pos = g.slice(pos, 0, 0, out_len).stage(|| "positions".into())?;
        let mut h = g.add(h, pos).stage(|| "positions".into())?;

        let mut states = vec![h];
        for i in 0..cfg.num_layers {
            h = self.attention(g, bound, h, gates, i, batch, out_len)?;
            h = self.feed_forward(g, bound, h, gates, i, batch, out_len)?;
            states.push(h);
        }
        let embedding = self.pool(g, bound, &states, batch, out_len)?;
        Ok(ForwardOutput {
            frames: h,
            embedding,
            gates,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        bound: &Bound,
        h: Var,
        gates: Option<Var>,
        i: usize,
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (d, dh) = (cfg.d_model, cfg.d_head);
        let heads = self.dims.heads[i];
        let st = || format!("block {i} attention");
        let p = |name: &str| self.var(bound, &format!("block.{i}.{name}"));
        let bo = p("attn.bo")?;
        if heads == 0 {
            return g.add(h, bo).stage(st);
        }
        let a = g.layer_norm(h, p("ln1.gamma")?, p("ln1.beta")?, LN_EPS).stage(st)?;
        let a = g.reshape(a, &[batch * len, d]).stage(st)?;
        let mut project = |w: &str, b: &str| -> Result<Var> {
            let y = g.matmul(a, p(w)?).stage(st)?;
            let y = g.add(y, p(b)?).stage(st)?;
            let y = g.reshape(y, &[batch, len, heads, dh]).stage(st)?;
            let y = g.permute(y, &[0, 2, 1, 3]).stage(st)?;
            g.reshape(y, &[batch * heads, len, dh]).stage(st)
        };
        let q = project("attn.wq", "attn.bq")?;
        let k = project("attn.wk", "attn.bk")?;
        let v = project("attn.wv", "attn.bv")?;
        let kt = g.transpose(k, 1, 2).stage(st)?;
        let scores = g.bmm(q, kt).stage(st)?;
        let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt()).stage(st)?;
        let probs = g.softmax(scores).stage(st)?;
        let ctx = g.bmm(probs, v).stage(st)?;
        let mut ctx = g.reshape(ctx, &[batch, heads, len, dh]).stage(st)?;
        if let (Some(f), Some(z)) = (&self.fabric, gates) {
            ctx = f.apply_segment(g, ctx, z, GroupKind::MhsaHead, i, 1)?;
        }
        let ctx = g.permute(ctx, &[0, 2, 1, 3]).stage(st)?;
        let ctx = g.reshape(ctx, &[batch * len, heads * dh]).stage(st)?;
        let o = g.matmul(ctx, p("attn.wo")?).stage(st)?;
        let o = g.add(o, bo).stage(st)?;
        let o = g.reshape(o, &[batch, len, d]).stage(st)?;
        g.add(h, o).stage(st)
    }

    #[allow(clippy::too_many_arguments)]
    fn feed_forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        h: Var,
        gates: Option<Var>,
        i: usize,
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let width = self.dims.ffn[i];
        let st = || format!("block {i} ffn");
        let p = |name: &str| self.var(bound, &format!("block.{i}.{name}"));
        let b2 = p("ffn.b2")?;
        if width == 0 {
            return g.add(h, b2).stage(st);
        }
        let a = g.layer_norm(h, p("ln2.gamma")?, p("ln2.beta")?, LN_EPS).stage(st)?;
        let a = g.reshape(a, &[batch * len, d]).stage(st)?;
        let u = g.matmul(a, p("ffn.w1")?).stage(st)?;
        let u = g.add(u, p("ffn.b1")?).stage(st)?;
        let mut u = g.gelu(u).stage(st)?;
        if let (Some(f), Some(z)) = (&self.fabric, gates) {
            u = f.apply_segment(g, u, z, GroupKind::FfnNeuron, i, 1)?;
        }
        let o = g.matmul(u, p("ffn.w2")?).stage(st)?;
        let o = g.add(o, b2).stage(st)?;
        let o = g.reshape(o, &[batch, len, d]).stage(st)?;
        g.add(h, o).stage(st)
    }

    /// Layer-weighted keys and values, per-head attentive averaging over
    /// frames, concatenation and projection.
    fn pool(&self, g: &mut Graph, bound: &Bound, states: &[Var], batch: usize, len: usize) -> Result<Var> {
        let cfg = &self.config;
        let (d, c, heads) = (cfg.d_model, cfg.pooling_dim, cfg.pooling_heads);
        let st = || "pooling".to_string();
        let p = |name: &str| self.var(bound, &format!("pool.{name}"));
        let n = batch * len * d;
        let flat = states
            .iter()
            .map(|&s| g.reshape(s, &[1, n]))
            .collect::<std::result::Result<Vec<_>, _>>()
            .stage(st)?;
        let stack = g.concat(&flat, 0).stage(st)?;
        let mut mix = |w: &str| -> Result<Var> {
            let w = g.softmax(p(w)?).stage(st)?;
            let w = g.reshape(w, &[1, states.len()]).stage(st)?;
            let y = g.matmul(w, stack).stage(st)?;
            g.reshape(y, &[batch * len, d]).stage(st)
        };
        let keys = mix("layer_wk")?;
        let values = mix("layer_wv")?;
        let kc = g.matmul(keys, p("wk")?).stage(st)?;
        let kc = g.add(kc, p("bk")?).stage(st)?;
        let vc = g.matmul(values, p("wv")?).stage(st)?;
        let vc = g.add(vc, p("bv")?).stage(st)?;
        let logits = g.matmul(kc, p("wa")?).stage(st)?;
        let logits = g.add(logits, p("ba")?).stage(st)?;
        let logits = g.reshape(logits, &[batch, len, heads]).stage(st)?;
        let logits = g.permute(logits, &[0, 2, 1]).stage(st)?;
        let att = g.softmax(logits).stage(st)?;
        let vc = g.reshape(vc, &[batch, len, c]).stage(st)?;
        let pooled = g.bmm(att, vc).stage(st)?;
        let pooled = g.reshape(pooled, &[batch, heads * c]).stage(st)?;
        let e = g.matmul(pooled, p("proj")?).stage(st)?;
        g.add(e, p("proj_b")?).stage(st)
    }

    /// Binary head logits `[B]` from embeddings.
    pub fn binary_logits(&self, g: &mut Graph, bound: &Bound, embedding: Var) -> Result<Var> {
        let st = || "binary head".to_string();
        let y = g.matmul(embedding, self.var(bound, "head.bce.weight")?).stage(st)?;
        let y = g.add(y, self.var(bound, "head.bce.bias")?).stage(st)?;
        let b = g.shape(y)[0];
        g.reshape(y, &[b]).stage(st)
    }

    /// AAM class matrix `[C, embedding_dim]`.
    pub fn aam_weight(&self, bound: &Bound) -> Result<Var> {
        self.var(bound, "head.aam.weight")
    }

    /// Embeddings in inference mode, processed in chunks of `chunk` items.
    pub fn embed(&self, inputs: &Tensor, mode: GateMode<'_>, chunk: usize) -> Result<Tensor> {
        self.infer(inputs, mode, chunk, |_, _, _, e| Ok(e))
    }

    /// Binary head scores in inference mode.
    pub fn score_binary(&self, inputs: &Tensor, mode: GateMode<'_>, chunk: usize) -> Result<Tensor> {
        self.infer(inputs, mode, chunk, |m, g, b, e| m.binary_logits(g, b, e))
    }

    fn infer(
        &self,
        inputs: &Tensor,
        mode: GateMode<'_>,
        chunk: usize,
        head: impl Fn(&Self, &mut Graph, &Bound, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let shape = inputs.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Model(format!("expected [N, T, F] inputs, got {shape:?}")));
        }
        let per = shape[1] * shape[2];
        let mut out = Vec::new();
        let mut width = 0;
        for start in (0..shape[0]).step_by(chunk.max(1)) {
            let n = chunk.max(1).min(shape[0] - start);
            let part = Tensor::new([n, shape[1], shape[2]], inputs.data()[start * per..(start + n) * per].to_vec())?;
            let mut g = Graph::with_precision(self.config.precision);
            let bound = self.bind(&mut g, false)?;
            let fwd = self.forward(&mut g, &bound, &part, mode)?;
            let y = head(self, &mut g, &bound, fwd.embedding)?;
            let v = g.value(y);
            width = v.numel() / n;
            out.extend_from_slice(v.data());
        }
        let shape = if width == 1 { vec![shape[0]] } else { vec![shape[0], width] };
        Ok(Tensor::new(shape, out)?)
    }
}

pub(crate) fn pooling_params(cfg: &ModelConfig) -> usize {
    let (d, c, h, e) = (cfg.d_model, cfg.pooling_dim, cfg.pooling_heads, cfg.embedding_dim);
    2 * (cfg.num_layers + 1) + 2 * (d * c + c) + (c * h + h) + (h * c * e + e)
}

pub(crate) fn head_params(cfg: &ModelConfig) -> usize {
    match cfg.head {
        HeadKind::Aam { num_classes } => num_classes * cfg.embedding_dim,
        HeadKind::Binary => cfg.embedding_dim + 1,
    }
}

fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut k = 0u64;
    let mut normal = |shape: Vec<usize>, std: f64| -> Result<Tensor> {
        let mut r = rng::stream_rng(seed, Domain::Init, k);
        k += 1;
        let n = shape.iter().product();
        let data = (0..n).map(|_| {
            let v: f64 = StandardNormal.sample(&mut r);
            std * v
        }).collect::<Vec<f64>>();
        Ok(Tensor::new(shape, data)?)
    };
    let d = cfg.d_model;
    let mut cin = cfg.feat_dim;
    for (l, spec) in cfg.conv.iter().enumerate() {
        let fan_in = (cin * spec.kernel) as f64;
        store.insert(format!("conv.{l}.weight"), normal(vec![spec.channels, cin, spec.kernel], fan_in.powf(-0.5))?)?;
        store.insert(format!("conv.{l}.bias"), Tensor::zeros([spec.channels]))?;
        cin = spec.channels;
    }
    store.insert("pos", normal(vec![cfg.positions(), d], 0.1)?)?;
    let hd = cfg.num_heads * cfg.d_head;
    let std_d = (d as f64).powf(-0.5);
    for i in 0..cfg.num_layers {
        let name = |n: &str| format!("block.{i}.{n}");
        store.insert(name("ln1.gamma"), Tensor::full([d], 1.0))?;
        store.insert(name("ln1.beta"), Tensor::zeros([d]))?;
        for (w, b) in [("attn.wq", "attn.bq"), ("attn.wk", "attn.bk"), ("attn.wv", "attn.bv")] {
            store.insert(name(w), normal(vec![d, hd], std_d)?)?;
            store.insert(name(b), Tensor::zeros([hd]))?;
        }
        store.insert(name("attn.wo"), normal(vec![hd, d], (hd as f64).powf(-0.5))?)?;
        store.insert(name("attn.bo"), Tensor::zeros([d]))?;
        store.insert(name("ln2.gamma"), Tensor::full([d], 1.0))?;
        store.insert(name("ln2.beta"), Tensor::zeros([d]))?;
        store.insert(name("ffn.w1"), normal(vec![d, cfg.ffn_dim], std_d)?)?;
        store.insert(name("ffn.b1"), Tensor::zeros([cfg.ffn_dim]))?;
        store.insert(name("ffn.w2"), normal(vec![cfg.ffn_dim, d], (cfg.ffn_dim as f64).powf(-0.5))?)?;
        store.insert(name("ffn.b2"), Tensor::zeros([d]))?;
    }
    let (c, ph, e) = (cfg.pooling_dim, cfg.pooling_heads, cfg.embedding_dim);
    let layers = cfg.num_layers + 1;
    store.insert("pool.layer_wk", Tensor::zeros([layers]))?;
    store.insert("pool.layer_wv", Tensor::zeros([layers]))?;
    store.insert("pool.wk", normal(vec![d, c], std_d)?)?;
    store.insert("pool.bk", Tensor::zeros([c]))?;
    store.insert("pool.wv", normal(vec![d, c], std_d)?)?;
    store.insert("pool.bv", Tensor::zeros([c]))?;
    store.insert("pool.wa", normal(vec![c, ph], (c as f64).powf(-0.5))?)?;
    store.insert("pool.ba", Tensor::zeros([ph]))?;
    store.insert("pool.proj", normal(vec![ph * c, e], ((ph * c) as f64).powf(-0.5))?)?;
    store.insert("pool.proj_b", Tensor::zeros([e]))?;
    match cfg.head {
        HeadKind::Aam { num_classes } => {
            let mut w = normal(vec![num_classes, e], 1.0)?;
            for row in w.data_mut().chunks_mut(e) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= norm);
            }
            store.insert("head.aam.weight", w)?;
        }
        HeadKind::Binary => {
            store.insert("head.bce.weight", normal(vec![e, 1], (e as f64).powf(-0.5))?)?;
            store.insert("head.bce.bias", Tensor::zeros([1]))?;
        }
    }
    Ok(store)
}
