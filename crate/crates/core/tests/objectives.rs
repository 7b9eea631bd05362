use dashu_float::FBig;
use hybrid_prune::gradcheck;
use hybrid_prune::objectives::{aam_loss, bce_loss, AamParams};
use hybrid_prune::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new([rows, cols], data).unwrap()
}

fn aam(emb: &Tensor, w: &Tensor, labels: &[usize], p: AamParams) -> f64 {
    let mut g = Graph::new();
    let e = g.param(emb.clone()).unwrap();
    let w = g.constant(w.clone()).unwrap();
    let l = aam_loss(&mut g, e, w, labels, p).unwrap();
    g.value(l).item()
}

fn bce(logits: &[f64], labels: &[bool]) -> f64 {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(logits.to_vec())).unwrap();
    let l = bce_loss(&mut g, x, labels).unwrap();
    g.value(l).item()
}

fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|r| {
            let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / n).collect()
        })
        .collect()
}

fn rescale(t: &Tensor, k: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * k).collect()).unwrap()
}

/// Plain scaled-softmax cross-entropy over cosine logits.
fn scaled_ce(emb: &Tensor, w: &Tensor, labels: &[usize], scale: f64) -> f64 {
    let (xs, ws) = (unit_rows(emb), unit_rows(w));
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(labels) {
        let logits: Vec<f64> = ws.iter().map(|c| scale * c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    total / labels.len() as f64
}

#[test]
fn zero_margin_is_scaled_cross_entropy() {
    let emb = mat(3, 4, vec![0.3, -1.2, 0.8, 0.5, 1.1, 0.1, -0.4, 0.9, -0.6, 1.9, -0.7, 0.2]);
    let w = mat(5, 4, (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect());
    let labels = [4, 0, 2];
    for scale in [1.0, 8.0, 32.0] {
        let got = aam(&emb, &w, &labels, AamParams::new(0.0, scale).unwrap());
        let want = scaled_ce(&emb, &w, &labels, scale);
        assert!((got - want).abs() < 1e-12, "scale {scale}: {got} vs {want}");
    }
}

#[test]
fn two_class_perfect_alignment() {
    let emb = mat(1, 2, vec![1.0, 0.0]);
    let w = mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let got = aam(&emb, &w, &[0], AamParams::default());
    let want = (1.0 + (-32.0 * 0.2f64.cos()).exp()).ln();
    assert!((got - want).abs() < 1e-15);
}

#[test]
fn orthogonal_without_margin_is_ln2() {
    let emb = mat(1, 3, vec![0.0, 0.0, 5.0]);
    let w = mat(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let got = aam(&emb, &w, &[0], AamParams::new(0.0, 32.0).unwrap());
    assert!((got - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn margin_raises_loss() {
    let emb = mat(2, 3, vec![0.9, 0.2, -0.1, 0.1, 0.8, 0.3]);
    let w = mat(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let plain = aam(&emb, &w, &[0, 1], AamParams::new(0.0, 32.0).unwrap());
    let margin = aam(&emb, &w, &[0, 1], AamParams::default());
    assert!(margin > plain);
}

#[test]
fn gradient_matches_finite_differences() {
    let emb = mat(3, 4, vec![0.3, -1.2, 0.8, 0.5, 1.1, 0.1, -0.4, 0.9, -0.6, 1.9, -0.7, 0.2]);
    let w = mat(5, 4, (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect());
    let c = gradcheck::check(&[emb, w], 1e-6, |g, v| aam_loss(g, v[0], v[1], &[4, 0, 2], AamParams::default())).unwrap();
    assert!(c.max_rel_err() < 1e-5, "{:?}", c.rel_err);
}

#[test]
fn gradient_near_aligned_and_opposed() {
    let w = mat(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.3, 0.3, 0.9]);
    for (sign, off) in [(1.0, 1e-2), (-1.0, 1e-2), (1.0, 2e-3), (-1.0, 2e-3)] {
        // target class 0, cosine close to +1 or -1
        let emb = mat(1, 3, vec![sign, off, -off]);
        let c = gradcheck::check(&[emb], 1e-7, |g, v| {
            let w = g.constant(w.clone())?;
            aam_loss(g, v[0], w, &[0], AamParams::new(0.2, 4.0).unwrap())
        })
        .unwrap();
        assert!(c.max_rel_err() < 1e-5, "sign {sign} off {off}: {:?}", c.rel_err);
    }
}

#[test]
fn gradient_finite_at_exact_alignment() {
    let emb = mat(1, 2, vec![1.0, 0.0]);
    let w = mat(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    let mut g = Graph::new();
    let e = g.param(emb).unwrap();
    let w = g.constant(w).unwrap();
    let l = aam_loss(&mut g, e, w, &[0], AamParams::default()).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(e).is_finite());
}

#[test]
fn power_of_two_rescaling_is_exact() {
    let emb = mat(2, 3, vec![0.9, 0.2, -0.1, 0.1, 0.8, 0.3]);
    let w = mat(3, 3, vec![0.7, -0.2, 0.1, 0.0, 1.0, 0.4, -0.5, 0.3, 0.9]);
    let base = aam(&emb, &w, &[2, 1], AamParams::default());
    for k in [0.25, 2.0, 1024.0] {
        let scaled = rescale(&emb, k);
        assert_eq!(aam(&scaled, &w, &[2, 1], AamParams::default()).to_bits(), base.to_bits());
    }
}

#[test]
fn malformed_inputs_rejected() {
    let mut g = Graph::new();
    let e = g.param(mat(2, 3, vec![1.0; 6])).unwrap();
    let w = g.constant(mat(2, 2, vec![1.0; 4])).unwrap();
    assert!(aam_loss(&mut g, e, w, &[0, 1], AamParams::default()).is_err());
    let w = g.constant(mat(2, 3, vec![1.0; 6])).unwrap();
    assert!(aam_loss(&mut g, e, w, &[0], AamParams::default()).is_err());
    let x = g.param(Tensor::from_vec(vec![0.0, 1.0])).unwrap();
    assert!(bce_loss(&mut g, x, &[true]).is_err());
}

/// ln(1 + exp(z)) at 256-bit precision.
fn softplus_oracle(z: f64) -> f64 {
    let one: FBig = FBig::ONE.with_precision(256).value();
    let z = FBig::try_from(z).unwrap().with_precision(256).value();
    (one + z.exp()).ln().to_f64().value()
}

#[test]
fn bce_matches_high_precision_oracle() {
    let logits = [-40.0, -7.5, -1.0, -1e-3, 0.0, 2e-9, 0.7, 3.3, 19.0, 45.0];
    let labels = [true, false, true, false, true, true, false, false, true, false];
    let got = bce(&logits, &labels);
    let want = logits
        .iter()
        .zip(&labels)
        .map(|(&x, &y)| softplus_oracle(if y { -x } else { x }))
        .sum::<f64>()
        / logits.len() as f64;
    assert!(((got - want) / want).abs() < 1e-13, "{got} vs {want}");
}

#[test]
fn bce_examples() {
    assert!((bce(&[0.0], &[true]) - 2f64.ln()).abs() < 1e-15);
    assert!((bce(&[0.0], &[false]) - 2f64.ln()).abs() < 1e-15);
    let confident = bce(&[50.0], &[true]);
    assert!(confident > 0.0 && confident < 1e-20);
    assert!((bce(&[50.0], &[false]) - 50.0).abs() < 1e-12);
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let x = Tensor::from_vec(vec![-2.0, -0.3, 0.0, 0.8, 4.0]);
    let y = [true, false, false, true, false];
    let c = gradcheck::check(&[x], 1e-6, |g, v| bce_loss(g, v[0], &y)).unwrap();
    assert!(c.max_rel_err() < 1e-5, "{:?}", c.rel_err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aam_invariant_to_positive_rescaling(
        data in prop::collection::vec(-2.0f64..2.0, 6),
        k in 1e-3f64..1e3,
        y0 in 0usize..3,
        y1 in 0usize..3,
    ) {
        prop_assume!(data.chunks(3).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-4));
        let emb = mat(2, 3, data);
        let w = mat(3, 3, vec![0.7, -0.2, 0.1, 0.0, 1.0, 0.4, -0.5, 0.3, 0.9]);
        let base = aam(&emb, &w, &[y0, y1], AamParams::default());
        let scaled = aam(&rescale(&emb, k), &w, &[y0, y1], AamParams::default());
        prop_assert!((base - scaled).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn bce_is_nonnegative_and_finite(xs in prop::collection::vec(-800.0f64..800.0, 1..16)) {
        let labels: Vec<bool> = xs.iter().enumerate().map(|(i, _)| i % 2 == 0).collect();
        let l = bce(&xs, &labels);
        prop_assert!(l.is_finite() && l >= 0.0);
    }
}
