use hybrid_prune::metrics::{self, TrialScores};
use hybrid_prune::model::Preset;
use hybrid_prune::synth::{self, gen_spoof, gen_sv, Dataset, SpoofTaskSpec, SvTaskSpec, TaskKind};
use hybrid_prune::tensor::Tensor;
use hybrid_prune::trainer::{self, TrainConfig};
use proptest::prelude::*;

fn small_sv(num_classes: usize, eval_classes: usize) -> SvTaskSpec {
    SvTaskSpec {
        num_classes,
        eval_classes,
        frames: 8,
        feat_dim: 6,
        train_per_class: 6,
        eval_per_class: 6,
        ..SvTaskSpec::default()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn mean_embeddings(d: &Dataset) -> Tensor {
    let rows: Vec<f64> = (0..d.len()).flat_map(|i| synth::frame_mean(d, i)).collect();
    Tensor::new([d.len(), d.feat_dim], rows).unwrap()
}

#[test]
fn noiseless_classes_repeat_and_separate_perfectly() {
    let spec = SvTaskSpec {
        noise_scale: 0.0,
        session_scale: 0.0,
        ..small_sv(10, 5)
    };
    let d = gen_sv(&spec).unwrap();
    for i in 0..d.eval.len() {
        for j in 0..d.eval.len() {
            if d.eval.labels[i] == d.eval.labels[j] {
                assert_eq!(d.eval.utterance(i), d.eval.utterance(j));
            }
        }
    }
    let scores = metrics::cosine_scores(&mean_embeddings(&d.eval), &d.trials).unwrap();
    assert_eq!(metrics::eer(&scores).unwrap(), 0.0);
}

#[test]
fn sv_generation_is_bit_identical() {
    let spec = small_sv(8, 3);
    let (a, b) = (gen_sv(&spec).unwrap(), gen_sv(&spec).unwrap());
    for (x, y) in [(&a.train, &b.train), (&a.eval, &b.eval)] {
        let bits = |d: &Dataset| (0..d.len()).flat_map(|i| d.utterance(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(x), bits(y));
        assert_eq!(x.labels, y.labels);
    }
    assert_eq!(a.trials, b.trials);
    let other = gen_sv(&SvTaskSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.train, other.train);
}

#[test]
fn two_classes_intra_cosine_exceeds_inter() {
    let spec = SvTaskSpec {
        num_classes: 3,
        eval_classes: 2,
        frames: 4,
        eval_per_class: 20,
        ..small_sv(3, 2)
    };
    let d = gen_sv(&spec).unwrap();
    let emb: Vec<Vec<f64>> = (0..d.eval.len()).map(|i| synth::frame_mean(&d.eval, i)).collect();
    let (mut intra, mut inter) = (Vec::new(), Vec::new());
    for i in 0..emb.len() {
        for j in i + 1..emb.len() {
            let c = cosine(&emb[i], &emb[j]);
            if d.eval.labels[i] == d.eval.labels[j] {
                intra.push(c);
            } else {
                inter.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&intra) > mean(&inter), "{} vs {}", mean(&intra), mean(&inter));
}

#[test]
fn sv_train_and_eval_classes_are_disjoint() {
    for spec in [SvTaskSpec::default(), SvTaskSpec::small_data(), small_sv(5, 2)] {
        let d = gen_sv(&SvTaskSpec {
            train_per_class: 2,
            eval_per_class: 2,
            ..spec.clone()
        })
        .unwrap();
        let train: std::collections::BTreeSet<_> = d.train.labels.iter().collect();
        assert!(d.eval.labels.iter().all(|c| !train.contains(c)));
        assert_eq!(train.len(), spec.train_classes());
    }
}

#[test]
fn small_data_variant_has_about_two_thousand_utterances() {
    let s = SvTaskSpec::small_data();
    let n = s.train_classes() * s.train_per_class;
    assert!((1_800..=2_200).contains(&n), "{n}");
}

#[test]
fn trials_carry_correct_labels() {
    let d = gen_sv(&small_sv(9, 4)).unwrap();
    let targets = d.trials.iter().filter(|t| t.target).count();
    assert_eq!(targets, 4 * 15);
    assert_eq!(d.trials.len(), 2 * targets);
    for t in &d.trials {
        assert_eq!(t.target, d.eval.labels[t.a] == d.eval.labels[t.b]);
    }
}

#[test]
fn invalid_specs_rejected() {
    assert!(gen_sv(&SvTaskSpec { eval_classes: 1, ..small_sv(5, 2) }).is_err());
    assert!(gen_sv(&SvTaskSpec { noise_scale: -1.0, ..small_sv(5, 2) }).is_err());
    assert!(gen_spoof(&SpoofTaskSpec { period: 3, ..SpoofTaskSpec::default() }).is_err());
    assert!(gen_spoof(&SpoofTaskSpec { amplitude: f64::NAN, ..SpoofTaskSpec::default() }).is_err());
}

#[test]
fn spoof_classes_differ_only_by_the_artifact() {
    let spec = SpoofTaskSpec {
        train_count: 16,
        eval_count: 4,
        ..SpoofTaskSpec::default()
    };
    let clean = SpoofTaskSpec {
        amplitude: 0.0,
        ..spec.clone()
    };
    for i in 0..16 {
        let (a, y) = synth::spoof_utterance(&spec, 0, i);
        let (b, y0) = synth::spoof_utterance(&clean, 0, i);
        assert_eq!(y, y0);
        let changed = a.iter().zip(&b).any(|(p, q)| p != q);
        assert_eq!(changed, y == 0, "utterance {i}");
    }
}

/// Mean squared difference between consecutive frames.
fn frame_difference_energy(d: &Dataset, i: usize) -> f64 {
    let u = d.utterance(i);
    let f = d.feat_dim;
    let mut e = 0.0;
    for t in 1..d.frames {
        for j in 0..f {
            e += (u[t * f + j] - u[(t - 1) * f + j]).powi(2);
        }
    }
    e / ((d.frames - 1) * f) as f64
}

/// One-feature logistic regression fitted by full-batch gradient descent.
fn fit_probe(x: &[f64], y: &[usize]) -> (f64, f64) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    let (mut w, mut b) = (0.0, 0.0);
    for _ in 0..500 {
        let (mut gw, mut gb) = (0.0, 0.0);
        for (&xi, &yi) in x.iter().zip(y) {
            let z = (xi - mean) / sd;
            let p = 1.0 / (1.0 + (-(w * z + b)).exp());
            gw += (p - yi as f64) * z;
            gb += p - yi as f64;
        }
        w -= 0.5 * gw / x.len() as f64;
        b -= 0.5 * gb / x.len() as f64;
    }
    (w / sd, b - w * mean / sd)
}

#[test]
fn loud_artifact_is_linearly_separable() {
    let spec = SpoofTaskSpec {
        amplitude: 0.5,
        train_count: 400,
        eval_count: 400,
        ..SpoofTaskSpec::default()
    };
    let d = gen_spoof(&spec).unwrap();
    let feats = |ds: &Dataset| (0..ds.len()).map(|i| frame_difference_energy(ds, i)).collect::<Vec<_>>();
    let (w, b) = fit_probe(&feats(&d.train), &d.train.labels);
    let scores: Vec<f64> = feats(&d.eval).iter().map(|x| w * x + b).collect();
    let labels: Vec<bool> = d.eval.labels.iter().map(|&y| y == 1).collect();
    let eer = metrics::eer(&metrics::binary_scores(&scores, &labels)).unwrap();
    assert!(eer < 0.02, "probe eer {eer}");
}

#[test]
fn silent_artifact_leaves_a_trained_model_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        task: TaskKind::ToySpoof,
        preset: Preset::Tiny,
        target: 0.0,
        epochs: 2.0,
        eval_every: 2.0,
        spoof_amplitude: 0.0,
        out_dir: dir.path().join("run"),
        ..TrainConfig::default()
    };
    let t = trainer::fit(&cfg).unwrap();
    let m = t.evaluate().unwrap();
    assert!((m.eer - 0.5).abs() <= 0.05, "eer {}", m.eer);
}

#[test]
fn export_layout_matches_documentation() {
    let spec = SpoofTaskSpec {
        train_count: 6,
        eval_count: 3,
        frames: 4,
        feat_dim: 2,
        ..SpoofTaskSpec::default()
    };
    let d = gen_spoof(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.bin");
    d.train.export(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..8], b"HPSYNTH1");
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    assert_eq!([u32_at(8), u32_at(12), u32_at(16)], [6, 4, 2]);
    let labels: Vec<usize> = (0..6).map(|i| u32_at(20 + 4 * i) as usize).collect();
    assert_eq!(labels, d.train.labels);
    let values = &bytes[20 + 24..];
    assert_eq!(values.len(), 4 * 6 * 4 * 2);
    for (k, chunk) in values.chunks(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        let (i, j) = (k / 8, k % 8);
        assert_eq!(v, d.train.utterance(i)[j] as f32);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sv_utterances_are_random_access(class in 0usize..6, k in 0usize..4, seed in 0u64..50) {
        let spec = SvTaskSpec { seed, ..small_sv(6, 2) };
        let d = gen_sv(&SvTaskSpec { train_per_class: 4, eval_per_class: 4, ..spec.clone() }).unwrap();
        let direct = synth::sv_utterance(&spec, class, k);
        let row = if class < 4 { k * 4 + class } else { (class - 4) * 4 + k };
        let ds = if class < 4 { &d.train } else { &d.eval };
        prop_assert_eq!(ds.utterance(row), &direct[..]);
    }

    #[test]
    fn spoof_utterances_are_random_access(i in 0usize..40, seed in 0u64..50) {
        let spec = SpoofTaskSpec { seed, train_count: 40, eval_count: 2, frames: 10, feat_dim: 3, ..SpoofTaskSpec::default() };
        let d = gen_spoof(&spec).unwrap();
        let (u, y) = synth::spoof_utterance(&spec, 0, i);
        prop_assert_eq!(d.train.utterance(i), &u[..]);
        prop_assert_eq!(d.train.labels[i], y);
    }

    #[test]
    fn equal_scores_give_half_eer(n in 1usize..20, m in 1usize..20) {
        let s = TrialScores::new(vec![0.3; n], vec![0.3; m]);
        prop_assert_eq!(metrics::eer(&s).unwrap(), 0.5);
    }
}
