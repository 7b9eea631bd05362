use hybrid_prune::controller::ControllerState;
use hybrid_prune::fabric::{GateFabric, GroupKind, StructuralGroup};
use hybrid_prune::gradcheck;
use hybrid_prune::hard_concrete::GateShape;
use hybrid_prune::tensor::{Graph, Tensor};
use proptest::prelude::*;

const BETA: f64 = 2.0 / 3.0;

fn group(id: usize, owned: usize) -> StructuralGroup {
    StructuralGroup {
        id,
        kind: GroupKind::MhsaHead,
        layer: 0,
        unit: id,
        owned,
        shared: vec![],
    }
}

fn fabric(owned: &[usize], fixed: usize) -> GateFabric {
    let groups = owned.iter().enumerate().map(|(i, &o)| group(i, o)).collect();
    GateFabric::new(groups, fixed, fixed + owned.iter().sum::<usize>(), GateShape::default(), 2.5).unwrap()
}

#[test]
fn schedule_examples() {
    let c = ControllerState::new(0.5, 5.0, 0.02).unwrap();
    assert_eq!(c.scheduled_target(0.0), 0.0);
    assert_eq!(c.scheduled_target(2.5), 0.25);
    assert_eq!(c.scheduled_target(5.0), 0.5);
    assert_eq!(c.scheduled_target(9.0), 0.5);
}

#[test]
fn regularizer_examples() {
    let mut c = ControllerState::new(0.5, 5.0, 0.02).unwrap();
    c.lambda1 = 2.0;
    c.lambda2 = 10.0;
    assert_eq!(c.penalty(0.3, 0.3), 0.0);
    assert!((c.penalty(0.4, 0.3) - 0.3).abs() < 1e-12);
    let mut g = Graph::new();
    let s = g.constant(Tensor::scalar(0.4)).unwrap();
    let r = c.regularizer(&mut g, s, 0.3).unwrap();
    assert!((g.value(r).item() - 0.3).abs() < 1e-12);
}

#[test]
fn ascent_examples() {
    let mut c = ControllerState::new(0.5, 5.0, 1.0).unwrap();
    let before = c;
    c.ascend_multipliers(0.3, 0.3);
    assert_eq!(c, before);
    c.ascend_multipliers(0.5, 0.3);
    assert!((c.lambda1 - 0.2).abs() < 1e-15);
    assert!((c.lambda2 - 0.04).abs() < 1e-15);
}

#[test]
fn constant_violation_grows_multipliers_linearly() {
    let mut c = ControllerState::new(0.5, 5.0, 0.1).unwrap();
    for n in 1..=50 {
        c.ascend_multipliers(0.1, 0.4);
        assert!((c.lambda1 - n as f64 * 0.1 * -0.3).abs() < 1e-12);
        assert!((c.lambda2 - n as f64 * 0.1 * 0.09).abs() < 1e-12);
    }
}

#[test]
fn invalid_states_rejected() {
    assert!(ControllerState::new(1.0, 5.0, 0.02).is_err());
    assert!(ControllerState::new(-0.1, 5.0, 0.02).is_err());
    assert!(ControllerState::new(0.5, 0.0, 0.02).is_err());
    assert!(ControllerState::new(0.5, 5.0, 0.0).is_err());
}

#[test]
fn regularizer_gradient_on_three_gate_fabric() {
    let f = fabric(&[30, 12, 5], 7);
    let mut c = ControllerState::new(0.5, 5.0, 0.02).unwrap();
    c.lambda1 = -1.7;
    c.lambda2 = 3.2;
    let la = Tensor::from_vec(vec![0.4, -1.1, 1.9]);
    let check = gradcheck::check(&[la], 1e-6, |g, v| {
        let s = f.expected_sparsity_var(g, v[0])?;
        c.regularizer(g, s, 0.35)
    })
    .unwrap();
    assert!(check.max_rel_err() < 1e-5, "{:?}", check.rel_err);
}

/// Descent on the regularizer alone, then ascent, computed from the closed
/// form of the two-gate expected sparsity.
fn closed_form_step(la: &mut [f64; 2], owned: [f64; 2], c: &mut ControllerState, t: f64, lr: f64) -> f64 {
    let shift = BETA * (0.1f64 / 1.1).ln();
    let n = owned[0] + owned[1];
    let p = la.map(|x| 1.0 / (1.0 + (-(x - shift)).exp()));
    let s = 1.0 - (p[0] * owned[0] + p[1] * owned[1]) / n;
    let dr_ds = c.lambda1 + 2.0 * c.lambda2 * (s - t);
    for i in 0..2 {
        let ds = -owned[i] * p[i] * (1.0 - p[i]) / n;
        la[i] -= lr * dr_ds * ds;
    }
    c.ascend_multipliers(s, t);
    s
}

#[test]
fn larger_gate_prunes_first_under_pure_regularizer() {
    let owned = [90usize, 10];
    let f = fabric(&owned, 0);
    let (t, lr) = (0.5, 5.0);
    let mut c_lib = ControllerState::new(t, 1.0, 0.5).unwrap();
    let mut c_ref = c_lib;
    let mut la_lib = vec![2.5, 2.5];
    let mut la_ref = [2.5, 2.5];
    let mut first_below = [None, None];
    for step in 0..400 {
        let mut g = Graph::new();
        let la = g.param(Tensor::from_vec(la_lib.clone())).unwrap();
        let s = f.expected_sparsity_var(&mut g, la).unwrap();
        let s_val = g.value(s).item();
        let r = c_lib.regularizer(&mut g, s, t).unwrap();
        let grad = g.backward(r).unwrap().wrt(la);
        for (x, d) in la_lib.iter_mut().zip(grad.data()) {
            *x -= lr * d;
        }
        c_lib.ascend_multipliers(s_val, t);

        let s_ref = closed_form_step(&mut la_ref, [90.0, 10.0], &mut c_ref, t, lr);
        assert!((s_val - s_ref).abs() < 1e-12);
        for i in 0..2 {
            assert!((la_lib[i] - la_ref[i]).abs() < 1e-9, "step {step}: {la_lib:?} vs {la_ref:?}");
            if first_below[i].is_none() && la_lib[i] < 0.0 {
                first_below[i] = Some(step);
            }
        }
        assert!(la_lib[0] <= la_lib[1]);
    }
    let big = first_below[0].expect("large gate pruned");
    assert!(first_below[1].is_none_or(|small| small > big), "{first_below:?}");
}

proptest! {
    #[test]
    fn lambda2_is_nondecreasing(violations in prop::collection::vec(-1.0f64..1.0, 1..64), lr in 1e-3f64..2.0) {
        let mut c = ControllerState::new(0.5, 5.0, lr).unwrap();
        let mut prev = c.lambda2;
        for v in violations {
            c.ascend_multipliers(0.5 + v * 0.5, 0.5);
            prop_assert!(c.lambda2 >= prev);
            prop_assert!(c.lambda2 >= 0.0);
            prev = c.lambda2;
        }
    }

    #[test]
    fn schedule_is_linear_then_flat(progress in 0.0f64..20.0, t in 0.0f64..0.99, warm in 0.5f64..10.0) {
        let c = ControllerState::new(t, warm, 0.02).unwrap();
        let want = if progress >= warm { t } else { progress / warm * t };
        prop_assert!((c.scheduled_target(progress) - want).abs() <= 1e-15);
    }
}
