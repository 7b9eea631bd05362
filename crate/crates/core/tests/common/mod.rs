//! Oracles shared by the integration tests.
#![allow(dead_code)]

use hybrid_prune::metrics::{DcfParams, TrialScores};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// FAR and FRR for "accept when score >= thr", counted trial by trial.
pub fn rates(s: &TrialScores, thr: f64) -> (f64, f64) {
    let fa = s.nontarget.iter().filter(|&&x| x >= thr).count() as f64 / s.nontarget.len() as f64;
    let fr = s.target.iter().filter(|&&x| x < thr).count() as f64 / s.target.len() as f64;
    (fa, fr)
}

/// Thresholds from strictest (nothing accepted) to loosest.
pub fn thresholds(s: &TrialScores) -> Vec<f64> {
    let mut t: Vec<f64> = s.target.iter().chain(&s.nontarget).copied().collect();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    std::iter::once(f64::INFINITY).chain(t).collect()
}

pub fn eer_oracle(s: &TrialScores) -> f64 {
    let pts: Vec<(f64, f64)> = thresholds(s).into_iter().map(|t| rates(s, t)).collect();
    for w in pts.windows(2) {
        let ((fa0, fr0), (fa1, fr1)) = (w[0], w[1]);
        if fr0 == fa0 {
            return fa0;
        }
        if fr1 <= fa1 {
            if fr1 == fa1 {
                return fa1;
            }
            // intersect FRR - FAR = 0 on the segment
            let (d0, d1) = (fr0 - fa0, fr1 - fa1);
            let a = d0 / (d0 - d1);
            return fa0 + a * (fa1 - fa0);
        }
    }
    unreachable!()
}

pub fn dcf_oracle(s: &TrialScores, p: DcfParams) -> f64 {
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    thresholds(s)
        .into_iter()
        .map(|t| {
            let (fa, fr) = rates(s, t);
            (p.c_miss * p.p_target * fr + p.c_fa * (1.0 - p.p_target) * fa) / norm
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn random_scores(r: &mut ChaCha8Rng) -> TrialScores {
    let nt = r.random_range(1..500);
    let nn = r.random_range(1..500);
    // coarse grid on some sets to force ties
    let grid = r.random_bool(0.5);
    let mut draw = |shift: f64| {
        let v: f64 = r.random::<f64>() * 2.0 + shift;
        if grid {
            (v * 8.0).round() / 8.0
        } else {
            v
        }
    };
    let target = (0..nt).map(|_| draw(0.7)).collect();
    let nontarget = (0..nn).map(|_| draw(0.0)).collect();
    TrialScores::new(target, nontarget)
}
