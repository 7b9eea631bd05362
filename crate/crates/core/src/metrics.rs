//! Detection metrics, trial scoring and layer-wise retention patterns.

use crate::error::{Error, Result};
use crate::fabric::{GateFabric, GroupKind};
use crate::synth::Trial;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialScores {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl TrialScores {
    pub fn new(target: Vec<f64>, nontarget: Vec<f64>) -> Self {
        TrialScores { target, nontarget }
    }

    fn check(&self) -> Result<()> {
        if self.target.is_empty() || self.nontarget.is_empty() {
            return Err(Error::Metric("both target and nontarget scores are required".into()));
        }
        if self.target.iter().chain(&self.nontarget).any(|s| !s.is_finite()) {
            return Err(Error::Metric("scores must be finite".into()));
        }
        Ok(())
    }

    /// `(FAR, FRR)` at every distinct threshold, from "accept nothing" to
    /// "accept everything". A trial is accepted when its score is at or
    /// above the threshold.
    pub fn operating_points(&self) -> Result<Vec<(f64, f64)>> {
        self.check()?;
        let mut all: Vec<(f64, bool)> = self
            .target
            .iter()
            .map(|&s| (s, true))
            .chain(self.nontarget.iter().map(|&s| (s, false)))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0));
        let (nt, nn) = (self.target.len() as f64, self.nontarget.len() as f64);
        let (mut acc_t, mut acc_n) = (0usize, 0usize);
        let mut points = vec![(0.0, 1.0)];
        let mut i = 0;
        while i < all.len() {
            let s = all[i].0;
            while i < all.len() && all[i].0 == s {
                if all[i].1 {
                    acc_t += 1;
                } else {
                    acc_n += 1;
                }
                i += 1;
            }
            points.push((acc_n as f64 / nn, 1.0 - acc_t as f64 / nt));
        }
        Ok(points)
    }
}

/// Equal error rate, interpolating linearly between adjacent operating
/// points when FAR and FRR never coincide exactly.
pub fn eer(scores: &TrialScores) -> Result<f64> {
    let pts = scores.operating_points()?;
    let mut prev = pts[0];
    for &(far, frr) in &pts {
        let d = frr - far;
        if d == 0.0 {
            return Ok(far);
        }
        if d < 0.0 {
            let dp = prev.1 - prev.0;
            let a = dp / (dp - d);
            return Ok(prev.0 + a * (far - prev.0));
        }
        prev = (far, frr);
    }
    unreachable!("last operating point has FRR 0 and FAR 1")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

/// Normalized minimum detection cost over all thresholds.
pub fn min_dcf(scores: &TrialScores, p: DcfParams) -> Result<f64> {
    if !(p.p_target > 0.0 && p.p_target < 1.0 && p.c_miss > 0.0 && p.c_fa > 0.0) {
        return Err(Error::Metric(format!("invalid DCF parameters {p:?}")));
    }
    let pts = scores.operating_points()?;
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    let best = pts
        .iter()
        .map(|&(far, frr)| p.c_miss * p.p_target * frr + p.c_fa * (1.0 - p.p_target) * far)
        .fold(f64::INFINITY, f64::min);
    Ok(best / norm)
}

/// Cosine similarity scores for trials over `embeddings [N, D]`.
pub fn cosine_scores(embeddings: &Tensor, trials: &[Trial]) -> Result<TrialScores> {
    let shape = embeddings.shape();
    if shape.len() != 2 {
        return Err(Error::Metric(format!("embeddings must be [N, D], got {shape:?}")));
    }
    let d = shape[1];
    let rows: Vec<Vec<f64>> = embeddings
        .data()
        .chunks(d)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut out = TrialScores::default();
    for t in trials {
        if t.a >= rows.len() || t.b >= rows.len() {
            return Err(Error::Metric(format!("trial ({}, {}) out of range", t.a, t.b)));
        }
        let s: f64 = rows[t.a].iter().zip(&rows[t.b]).map(|(x, y)| x * y).sum();
        if t.target {
            out.target.push(s);
        } else {
            out.nontarget.push(s);
        }
    }
    Ok(out)
}

/// Splits binary-task scores by label (`true` = positive class).
pub fn binary_scores(scores: &[f64], labels: &[bool]) -> TrialScores {
    let mut out = TrialScores::default();
    for (&s, &y) in scores.iter().zip(labels) {
        if y {
            out.target.push(s);
        } else {
            out.nontarget.push(s);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub layer: usize,
    pub kind: GroupKind,
    pub kept: usize,
    pub total: usize,
}

impl RetentionRow {
    pub fn fraction(&self) -> f64 {
        self.kept as f64 / self.total as f64
    }
}

/// Kept fraction per layer and structure kind, in fabric segment order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionPattern {
    pub rows: Vec<RetentionRow>,
}

impl RetentionPattern {
    /// Pattern of a binary keep assignment over the fabric's gates.
    pub fn from_keep(fabric: &GateFabric, keep: &[bool]) -> Result<Self> {
        if keep.len() != fabric.len() {
            return Err(Error::Metric(format!(
                "{} keep flags for {} gates",
                keep.len(),
                fabric.len()
            )));
        }
        let rows = fabric
            .segments()
            .iter()
            .map(|s| RetentionRow {
                layer: s.layer,
                kind: s.kind,
                kept: keep[s.start..s.start + s.len].iter().filter(|&&k| k).count(),
                total: s.len,
            })
            .collect();
        Ok(RetentionPattern { rows })
    }

    /// Pattern implied by the deterministic gates (kept iff positive).
    pub fn from_fabric(fabric: &GateFabric) -> Self {
        let keep: Vec<bool> = fabric.deterministic_gates().iter().map(|&z| z > 0.0).collect();
        Self::from_keep(fabric, &keep).expect("keep vector matches fabric")
    }

    pub fn fractions(&self, kind: GroupKind) -> Vec<f64> {
        self.rows.iter().filter(|r| r.kind == kind).map(RetentionRow::fraction).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,kept,total,fraction\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{:.6}", r.layer, r.kind, r.kept, r.total, r.fraction());
        }
        s
    }

    /// Sum of absolute fraction differences over matching rows.
    pub fn l1_distance(&self, other: &RetentionPattern) -> Result<f64> {
        if self.rows.len() != other.rows.len()
            || self
                .rows
                .iter()
                .zip(&other.rows)
                .any(|(a, b)| (a.layer, a.kind, a.total) != (b.layer, b.kind, b.total))
        {
            return Err(Error::Metric("retention patterns have different layouts".into()));
        }
        Ok(self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| (a.fraction() - b.fraction()).abs())
            .sum())
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
