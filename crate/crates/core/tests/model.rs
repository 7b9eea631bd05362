use hybrid_prune::fabric::GateMode;
use hybrid_prune::model::{ConvSpec, HeadKind, LayerDims, ModelConfig, Preset, PrunableModel};
use hybrid_prune::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn small_sv() -> PrunableModel {
    let cfg = ModelConfig::preset(Preset::Small, 24, 50, HeadKind::Aam { num_classes: 48 });
    PrunableModel::new(cfg, 0, true).unwrap()
}

fn linear(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

#[test]
fn small_preset_param_count_by_hand() {
    // conv 24 -> 32, k3:            32*24*3 + 32            =   2_336
    // conv 32 -> 64, k3:            64*32*3 + 64            =   6_208
    // positions, 11 frames x 64:                            =     704
    // block: 2 norms 256, qkv 3*4_160, out 4_160,
    //        ffn 16_640 + 16_448                            =  49_984 (x4)
    // pooling: layer weights 2*5, keys 1_040, values 1_040,
    //          attention 64 + 4, projection 2_048 + 32      =   4_238
    // aam class matrix 48 x 32                              =   1_536
    let m = small_sv();
    assert_eq!(m.count_params(), 2_336 + 6_208 + 704 + 4 * 49_984 + 4_238 + 1_536);
    assert_eq!(m.count_params(), 214_958);

    let d = 64;
    let block = 2 * 2 * d + 3 * linear(d, d) + linear(d, d) + linear(d, 256) + linear(256, d);
    assert_eq!(block, 49_984);
}

#[test]
fn small_preset_flop_count_by_hand() {
    // conv0: 24 frames, 2*24*32*24*3 + bias 768 + gelu 8*768         = 117_504
    // conv1: 11 frames, 2*11*64*32*3 + bias 704 + gelu 8*704         = 141_504
    // positions 704
    // attention: ln 4_928, qkv 272_448, scores 15_488, scale 484,
    //            softmax 2_420, context 15_488, out 90_112 + 704 + 704 = 402_776
    // ffn: ln 4_928, up 360_448 + 2_816, gelu 22_528,
    //      down 360_448 + 704 + 704                                 = 752_576
    // pooling: layer mix 14_130, key/value 45_408, logits 1_672,
    //          weighted sum 1_408, projection 4_128                  =  66_746
    let m = small_sv();
    let want = 117_504 + 141_504 + 704 + 4 * (402_776 + 752_576) + 66_746;
    assert_eq!(m.count_flops(50).unwrap(), want);
    assert_eq!(want, 4_947_866);
}

#[test]
fn one_ffn_neuron_costs_two_matmul_columns() {
    let m = small_sv();
    let mut dims = LayerDims::nominal(&m.config);
    let full = m.count_flops(50).unwrap();
    dims.ffn[2] -= 1;
    let t = 11;
    // up-projection column, its bias and gelu, down-projection row
    let neuron = 2 * t * 64 + t + 8 * t + 2 * t * 64;
    assert_eq!(full - m.count_flops_with(&dims, 50).unwrap(), neuron);
}

#[test]
fn flops_scale_with_input_length() {
    let m = small_sv();
    assert!(m.count_flops(40).unwrap() < m.count_flops(50).unwrap());
    assert!(m.count_flops(6).is_err());
}

fn set(m: &mut PrunableModel, name: &str, data: &[f64]) {
    let i = m.params.position(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = m.params.tensor_mut(i);
    assert_eq!(t.numel(), data.len(), "{name}");
    t.data_mut().copy_from_slice(data);
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm(v: [f64; 2], g: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let mean = (v[0] + v[1]) / 2.0;
    let var = ((v[0] - mean).powi(2) + (v[1] - mean).powi(2)) / 2.0;
    let r = 1.0 / (var + 1e-5).sqrt();
    [(v[0] - mean) * r * g[0] + b[0], (v[1] - mean) * r * g[1] + b[1]]
}

/// `v` as a row vector times `w` stored row-major `[2, 2]`, plus `b`.
fn affine(v: [f64; 2], w: &[f64; 4], b: [f64; 2]) -> [f64; 2] {
    [v[0] * w[0] + v[1] * w[2] + b[0], v[0] * w[1] + v[1] * w[3] + b[1]]
}

#[test]
fn two_dim_block_matches_hand_arithmetic() {
    let cfg = ModelConfig {
        feat_dim: 1,
        max_frames: 3,
        conv: vec![ConvSpec {
            channels: 2,
            kernel: 1,
            stride: 1,
        }],
        num_layers: 1,
        d_model: 2,
        num_heads: 1,
        d_head: 2,
        ffn_dim: 2,
        pooling_heads: 1,
        pooling_dim: 2,
        embedding_dim: 2,
        head: HeadKind::Binary,
        precision: Default::default(),
    };
    let mut m = PrunableModel::new(cfg, 0, false).unwrap();
    let conv_w = [0.8, -0.5];
    let conv_b = [0.1, 0.2];
    let pos = [0.0, 0.1, -0.2, 0.3, 0.05, -0.1];
    let (g1, b1) = ([1.2, 0.9], [0.05, -0.05]);
    let (wq, bq) = ([0.5, -0.3, 0.2, 0.7], [0.1, 0.0]);
    let (wk, bk) = ([-0.4, 0.6, 0.3, 0.2], [0.0, 0.2]);
    let (wv, bv) = ([0.9, 0.1, -0.2, 0.4], [-0.1, 0.3]);
    let (wo, bo) = ([0.6, -0.1, 0.25, 0.5], [0.02, -0.03]);
    let (g2, b2n) = ([0.8, 1.1], [0.0, 0.1]);
    let (w1, fb1) = ([0.3, -0.7, 0.45, 0.2], [0.05, -0.1]);
    let (w2, fb2) = ([-0.6, 0.35, 0.15, 0.9], [0.01, 0.02]);
    set(&mut m, "conv.0.weight", &conv_w);
    set(&mut m, "conv.0.bias", &conv_b);
    set(&mut m, "pos", &pos);
    for (n, v) in [
        ("ln1.gamma", &g1[..]),
        ("ln1.beta", &b1),
        ("attn.wq", &wq),
        ("attn.bq", &bq),
        ("attn.wk", &wk),
        ("attn.bk", &bk),
        ("attn.wv", &wv),
        ("attn.bv", &bv),
        ("attn.wo", &wo),
        ("attn.bo", &bo),
        ("ln2.gamma", &g2),
        ("ln2.beta", &b2n),
        ("ffn.w1", &w1),
        ("ffn.b1", &fb1),
        ("ffn.w2", &w2),
        ("ffn.b2", &fb2),
    ] {
        set(&mut m, &format!("block.0.{n}"), v);
    }
    let x = [0.4, -1.3, 2.1];

    let h: Vec<[f64; 2]> = (0..3)
        .map(|t| {
            let c = [gelu(conv_w[0] * x[t] + conv_b[0]), gelu(conv_w[1] * x[t] + conv_b[1])];
            [c[0] + pos[2 * t], c[1] + pos[2 * t + 1]]
        })
        .collect();
    let a: Vec<[f64; 2]> = h.iter().map(|&v| layer_norm(v, g1, b1)).collect();
    let q: Vec<[f64; 2]> = a.iter().map(|&v| affine(v, &wq, bq)).collect();
    let k: Vec<[f64; 2]> = a.iter().map(|&v| affine(v, &wk, bk)).collect();
    let v: Vec<[f64; 2]> = a.iter().map(|&v| affine(v, &wv, bv)).collect();
    let mut want = Vec::new();
    for t in 0..3 {
        let s: Vec<f64> = (0..3).map(|u| (q[t][0] * k[u][0] + q[t][1] * k[u][1]) / 2f64.sqrt()).collect();
        let e: Vec<f64> = s.iter().map(|z| z.exp()).collect();
        let sum: f64 = e.iter().sum();
        let ctx = [0, 1].map(|j| (0..3).map(|u| e[u] / sum * v[u][j]).sum::<f64>());
        let o = affine(ctx, &wo, bo);
        let h1 = [h[t][0] + o[0], h[t][1] + o[1]];
        let a2 = layer_norm(h1, g2, b2n);
        let u = affine(a2, &w1, fb1).map(gelu);
        let o2 = affine(u, &w2, fb2);
        want.extend([h1[0] + o2[0], h1[1] + o2[1]]);
    }

    let mut g = Graph::new();
    let bound = m.bind(&mut g, false).unwrap();
    let input = Tensor::new([1, 3, 1], x.to_vec()).unwrap();
    let out = m.forward(&mut g, &bound, &input, GateMode::Eval).unwrap();
    let got = g.value(out.frames).data();
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
    }
}

fn embed(m: &PrunableModel, x: &Tensor) -> Tensor {
    m.embed(x, GateMode::Eval, 8).unwrap()
}

#[test]
fn zero_input_gives_finite_embedding() {
    let m = small_sv();
    let x = Tensor::zeros([1, 50, 24]);
    let e = embed(&m, &x);
    assert_eq!(e.shape(), &[1, 32]);
    assert!(e.is_finite());
}

#[test]
fn eval_forward_is_bit_identical() {
    let m = small_sv();
    let x = Tensor::new([2, 50, 24], (0..2400).map(|i| ((i * 29 % 97) as f64 - 48.0) / 20.0).collect()).unwrap();
    let a = embed(&m, &x);
    let b = embed(&m, &x);
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn same_seed_same_weights() {
    let a = small_sv();
    let b = small_sv();
    assert_eq!(a.params, b.params);
    let cfg = ModelConfig::preset(Preset::Small, 24, 50, HeadKind::Aam { num_classes: 48 });
    let c = PrunableModel::new(cfg, 1, true).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn wrong_input_shape_rejected() {
    let m = small_sv();
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false).unwrap();
    for shape in [vec![1, 50, 23], vec![50, 24], vec![1, 4, 24], vec![1, 80, 24]] {
        let n = shape.iter().product();
        let x = Tensor::new(shape.clone(), vec![0.0; n]).unwrap();
        assert!(m.forward(&mut g, &bound, &x, GateMode::Eval).is_err(), "{shape:?}");
    }
}

#[test]
fn invalid_configs_rejected() {
    let base = ModelConfig::preset(Preset::Tiny, 3, 6, HeadKind::Binary);
    let mut c = base.clone();
    c.d_head = 3;
    assert!(PrunableModel::new(c, 0, true).is_err());
    let mut c = base.clone();
    c.conv.last_mut().unwrap().channels = 5;
    assert!(PrunableModel::new(c, 0, true).is_err());
    let mut c = base;
    c.max_frames = 1;
    assert!(PrunableModel::new(c, 0, true).is_err());
}

/// Embedding computed with the layer-mixing logits replaced by `wk`, `wv`.
fn with_layer_logits(m: &PrunableModel, wk: &[f64], wv: &[f64], x: &Tensor) -> Tensor {
    let mut m = m.clone();
    set(&mut m, "pool.layer_wk", wk);
    set(&mut m, "pool.layer_wv", wv);
    embed(&m, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layer_mixing_weights_form_a_simplex(
        wk in prop::collection::vec(-3.0f64..3.0, 2),
        wv in prop::collection::vec(-3.0f64..3.0, 2),
        shift in -5.0f64..5.0,
    ) {
        let m = PrunableModel::new(ModelConfig::preset(Preset::Tiny, 3, 6, HeadKind::Binary), 4, false).unwrap();
        let x = Tensor::new([2, 6, 3], (0..36).map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.0).collect()).unwrap();
        let mut g = Graph::new();
        let w = g.constant(Tensor::from_vec(wk.clone())).unwrap();
        let s = g.softmax(w).unwrap();
        let p = g.value(s).data();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        prop_assert!(p.iter().all(|&v| v > 0.0));

        // adding a constant to every logit leaves the mixture unchanged
        let a = with_layer_logits(&m, &wk, &wv, &x);
        let shifted = |v: &[f64]| v.iter().map(|x| x + shift).collect::<Vec<_>>();
        let b = with_layer_logits(&m, &shifted(&wk), &shifted(&wv), &x);
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
}
