//! Binding of Hard Concrete gates to prunable structures, with exact
//! accounting of which parameters each gate can remove.
//!
//! Every model parameter lands in exactly one bucket:
//!
//! * fixed: never removable;
//! * owned: removed when its single gate closes;
//! * shared: removed when either of its two gates closes, so it survives
//!   only while both gates stay open.
//!
//! With independent gates the expected remaining count is therefore exact:
//! `fixed + sum_g P_g * owned_g + sum_(a,b) P_a * P_b * shared_ab`.

use crate::error::{Error, Result};
use crate::hard_concrete::{self, GateShape, HardConcreteParams};
use crate::rng::{self, Domain};
use crate::tensor::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    ConvChannel,
    MhsaHead,
    FfnNeuron,
}

impl GroupKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::ConvChannel => "conv",
            GroupKind::MhsaHead => "mhsa",
            GroupKind::FfnNeuron => "ffn",
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parameters removable only while `partner` is also alive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedSlice {
    pub partner: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralGroup {
    pub id: usize,
    pub kind: GroupKind,
    pub layer: usize,
    /// Position of the unit inside its layer (channel, head or neuron index).
    pub unit: usize,
    pub owned: usize,
    /// Each shared pair is listed once, on the lower-id group.
    pub shared: Vec<SharedSlice>,
}

/// Contiguous run of gates for one (kind, layer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: GroupKind,
    pub layer: usize,
    pub start: usize,
    pub len: usize,
}

/// How gate values are produced for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum GateMode<'a> {
    /// Reparameterized samples from per-gate uniform draws.
    Train { uniforms: &'a [f64] },
    /// Noise-free deterministic gates.
    Eval,
    /// Externally supplied gate values (e.g. a binary assignment).
    Fixed(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateFabric {
    groups: Vec<StructuralGroup>,
    segments: Vec<Segment>,
    log_alpha: Vec<f64>,
    shape: GateShape,
    fixed: usize,
    total: usize,
}

impl GateFabric {
    /// Builds the fabric and checks that the buckets add up to `total`.
    pub fn new(
        groups: Vec<StructuralGroup>,
        fixed: usize,
        total: usize,
        shape: GateShape,
        init_log_alpha: f64,
    ) -> Result<Self> {
        for (i, g) in groups.iter().enumerate() {
            if g.id != i {
                return Err(Error::Fabric(format!("group {i} carries id {}", g.id)));
            }
            if let Some(s) = g.shared.iter().find(|s| s.partner <= i || s.partner >= groups.len()) {
                return Err(Error::Fabric(format!(
                    "group {i} shares with invalid partner {}",
                    s.partner
                )));
            }
        }
        let mut segments: Vec<Segment> = Vec::new();
        for g in &groups {
            match segments.last_mut() {
                Some(s) if s.kind == g.kind && s.layer == g.layer => {
                    if g.unit != s.len {
                        return Err(Error::Fabric(format!("group {} out of order in its layer", g.id)));
                    }
                    s.len += 1;
                }
                _ => {
                    if g.unit != 0 {
                        return Err(Error::Fabric(format!("group {} starts a layer at unit {}", g.id, g.unit)));
                    }
                    segments.push(Segment {
                        kind: g.kind,
                        layer: g.layer,
                        start: g.id,
                        len: 1,
                    })
                }
            }
        }
        let fabric = GateFabric {
            log_alpha: vec![init_log_alpha; groups.len()],
            groups,
            segments,
            shape,
            fixed,
            total,
        };
        let accounted = fabric.fixed + fabric.owned_total() + fabric.shared_total();
        if accounted != total {
            return Err(Error::Fabric(format!(
                "buckets sum to {accounted} but the model has {total} parameters"
            )));
        }
        Ok(fabric)
    }

    pub fn groups(&self) -> &[StructuralGroup] {
        &self.groups
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, kind: GroupKind, layer: usize) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind && s.layer == layer)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn shape(&self) -> GateShape {
        self.shape
    }

    pub fn fixed_params(&self) -> usize {
        self.fixed
    }

    pub fn total_params(&self) -> usize {
        self.total
    }

    pub fn log_alpha(&self) -> &[f64] {
        &self.log_alpha
    }

    pub fn log_alpha_mut(&mut self) -> &mut [f64] {
        &mut self.log_alpha
    }

    pub fn set_log_alpha(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.log_alpha.len() {
            return Err(Error::Fabric(format!(
                "expected {} log_alpha values, got {}",
                self.log_alpha.len(),
                values.len()
            )));
        }
        self.log_alpha.copy_from_slice(values);
        Ok(())
    }

    pub fn params(&self, gate: usize) -> HardConcreteParams {
        HardConcreteParams {
            log_alpha: self.log_alpha[gate],
            shape: self.shape,
        }
    }

    fn owned_total(&self) -> usize {
        self.groups.iter().map(|g| g.owned).sum()
    }

    fn shared_total(&self) -> usize {
        self.groups.iter().flat_map(|g| &g.shared).map(|s| s.count).sum()
    }

    /// All shared pairs as `(a, b, count)`.
    pub fn shared_pairs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.groups
            .iter()
            .flat_map(|g| g.shared.iter().map(move |s| (g.id, s.partner, s.count)))
    }

    pub fn prob_nonzero(&self) -> Vec<f64> {
        (0..self.len()).map(|i| hard_concrete::prob_nonzero(self.params(i))).collect()
    }

    pub fn deterministic_gates(&self) -> Vec<f64> {
        (0..self.len()).map(|i| hard_concrete::deterministic_gate(self.params(i))).collect()
    }

    /// Remaining parameter count weighted by arbitrary per-gate keep
    /// probabilities (or 0/1 indicators).
    pub fn remaining_given(&self, keep: &[f64]) -> f64 {
        let owned: f64 = self.groups.iter().map(|g| keep[g.id] * g.owned as f64).sum();
        let shared: f64 = self
            .shared_pairs()
            .map(|(a, b, c)| keep[a] * keep[b] * c as f64)
            .sum();
        self.fixed as f64 + owned + shared
    }

    pub fn expected_remaining_params(&self) -> f64 {
        self.remaining_given(&self.prob_nonzero())
    }

    pub fn expected_sparsity(&self) -> f64 {
        1.0 - self.expected_remaining_params() / self.total as f64
    }

    /// Exact parameter count left after removing every closed gate.
    pub fn realized_remaining(&self, keep: &[bool]) -> usize {
        let owned: usize = self.groups.iter().filter(|g| keep[g.id]).map(|g| g.owned).sum();
        let shared: usize = self
            .shared_pairs()
            .filter(|&(a, b, _)| keep[a] && keep[b])
            .map(|(_, _, c)| c)
            .sum();
        self.fixed + owned + shared
    }

    pub fn realized_sparsity(&self, keep: &[bool]) -> f64 {
        1.0 - self.realized_remaining(keep) as f64 / self.total as f64
    }

    /// Differentiable expected remaining count for `log_alpha` bound on `g`.
    pub fn expected_remaining_var(&self, g: &mut Graph, log_alpha: Var) -> Result<Var> {
        let p = hard_concrete::prob_nonzero_var(g, self.shape, log_alpha)?;
        let counts: Vec<f64> = self.groups.iter().map(|g| g.owned as f64).collect();
        let counts = g.constant(Tensor::from_vec(counts))?;
        let owned = g.mul(p, counts)?;
        let mut total = g.sum(owned)?;
        let pairs: Vec<(usize, usize, usize)> = self.shared_pairs().collect();
        if !pairs.is_empty() {
            let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let c: Vec<f64> = pairs.iter().map(|p| p.2 as f64).collect();
            let pa = g.index_select(p, &a)?;
            let pb = g.index_select(p, &b)?;
            let both = g.mul(pa, pb)?;
            let c = g.constant(Tensor::from_vec(c))?;
            let shared = g.mul(both, c)?;
            let shared = g.sum(shared)?;
            total = g.add(total, shared)?;
        }
        Ok(g.add_scalar(total, self.fixed as f64)?)
    }

    /// Differentiable `1 - E[remaining] / N`.
    pub fn expected_sparsity_var(&self, g: &mut Graph, log_alpha: Var) -> Result<Var> {
        let r = self.expected_remaining_var(g, log_alpha)?;
        let frac = g.mul_scalar(r, -1.0 / self.total as f64)?;
        Ok(g.add_scalar(frac, 1.0)?)
    }

    /// Per-gate uniforms for training step `step`, one counter-based stream
    /// per gate.
    pub fn draw_uniforms(&self, seed: u64, step: u64) -> Vec<f64> {
        (0..self.len() as u64)
            .map(|gate| rng::counter_uniform(seed, Domain::GateNoise, gate, step))
            .collect()
    }

    /// Gate values for all groups as a `[G]` node.
    pub fn gate_values(&self, g: &mut Graph, log_alpha: Var, mode: GateMode<'_>) -> Result<Var> {
        let n = self.len();
        let check = |len: usize, what: &str| {
            if len == n {
                Ok(())
            } else {
                Err(Error::Fabric(format!("{what}: expected {n} gate values, got {len}")))
            }
        };
        match mode {
            GateMode::Train { uniforms } => {
                check(uniforms.len(), "uniform draws")?;
                if let Some(&u) = uniforms.iter().find(|&&u| !(u > 0.0 && u < 1.0)) {
                    return Err(hard_concrete::GateError::UniformOutOfRange(u).into());
                }
                Ok(hard_concrete::sample_var(g, self.shape, log_alpha, uniforms)?)
            }
            GateMode::Eval => Ok(hard_concrete::deterministic_var(g, self.shape, log_alpha)?),
            GateMode::Fixed(values) => {
                check(values.len(), "fixed gates")?;
                Ok(g.constant(Tensor::from_vec(values.to_vec()))?)
            }
        }
    }

    /// Scales `act` along `axis` by the gates of one segment. The axis
    /// extent must equal the segment length.
    pub fn apply_segment(
        &self,
        g: &mut Graph,
        act: Var,
        gates: Var,
        kind: GroupKind,
        layer: usize,
        axis: usize,
    ) -> Result<Var> {
        let seg = *self
            .segment(kind, layer)
            .ok_or_else(|| Error::Fabric(format!("no {kind} gates for layer {layer}")))?;
        let shape = g.shape(act).to_vec();
        if axis >= shape.len() || shape[axis] != seg.len {
            return Err(Error::Fabric(format!(
                "{kind} gates of layer {layer}: {} gates for activation shape {shape:?} on axis {axis}",
                seg.len
            )));
        }
        let z = g.slice(gates, 0, seg.start, seg.len)?;
        let mut zshape = vec![seg.len];
        zshape.extend(std::iter::repeat_n(1, shape.len() - axis - 1));
        let z = g.reshape(z, &zshape)?;
        Ok(g.mul(act, z)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(id: usize, layer: usize, unit: usize, owned: usize) -> StructuralGroup {
        StructuralGroup {
            id,
            kind: GroupKind::FfnNeuron,
            layer,
            unit,
            owned,
            shared: vec![],
        }
    }

    #[test]
    fn single_gate_expectation() {
        // one gate owning 10 of 20 params; log_alpha chosen so P(nonzero) = 0.5
        let mut f = GateFabric::new(vec![group(0, 0, 0, 10)], 10, 20, GateShape::default(), 0.0).unwrap();
        let shift = GateShape::default().beta * (0.1f64 / 1.1).ln();
        f.set_log_alpha(&[shift]).unwrap();
        assert!((f.prob_nonzero()[0] - 0.5).abs() < 1e-15);
        assert!((f.expected_remaining_params() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn certain_gates_give_total_or_fixed() {
        let groups = vec![group(0, 0, 0, 4), group(1, 0, 1, 6)];
        let mut f = GateFabric::new(groups, 0, 10, GateShape::default(), 1e3).unwrap();
        assert_eq!(f.expected_remaining_params(), 10.0);
        assert_eq!(f.expected_sparsity(), 0.0);
        f.set_log_alpha(&[-1e3, -1e3]).unwrap();
        assert_eq!(f.expected_sparsity(), 1.0);
    }

    #[test]
    fn shared_slice_uses_independence_product() {
        let mut a = group(0, 0, 0, 0);
        a.shared.push(SharedSlice { partner: 1, count: 100 });
        let f = GateFabric::new(vec![a, group(1, 1, 0, 0)], 0, 100, GateShape::default(), 0.0).unwrap();
        let keep = [0.8, 0.8];
        assert!((f.remaining_given(&keep) - 64.0).abs() < 1e-12);
        assert_eq!(f.realized_remaining(&[true, false]), 0);
        assert_eq!(f.realized_remaining(&[true, true]), 100);
    }

    #[test]
    fn incomplete_accounting_is_rejected() {
        let err = GateFabric::new(vec![group(0, 0, 0, 5)], 1, 10, GateShape::default(), 0.0).unwrap_err();
        assert!(err.to_string().contains("sum to 6"), "{err}");
    }

    #[test]
    fn segments_follow_layers() {
        let groups = vec![group(0, 0, 0, 1), group(1, 0, 1, 1), group(2, 1, 0, 1)];
        let f = GateFabric::new(groups, 0, 3, GateShape::default(), 0.0).unwrap();
        assert_eq!(f.segments().len(), 2);
        assert_eq!(f.segment(GroupKind::FfnNeuron, 1).unwrap().start, 2);
    }

    #[test]
    fn apply_segment_rejects_mismatched_activation() {
        let groups = vec![group(0, 0, 0, 1), group(1, 0, 1, 1)];
        let f = GateFabric::new(groups, 0, 2, GateShape::default(), 0.0).unwrap();
        let mut g = Graph::new();
        let la = g.param(Tensor::from_vec(f.log_alpha().to_vec())).unwrap();
        let z = f.gate_values(&mut g, la, GateMode::Eval).unwrap();
        let act = g.constant(Tensor::zeros([2, 3])).unwrap();
        assert!(f.apply_segment(&mut g, act, z, GroupKind::FfnNeuron, 0, 1).is_err());
        let act = g.constant(Tensor::full([3, 2], 2.0)).unwrap();
        let out = f.apply_segment(&mut g, act, z, GroupKind::FfnNeuron, 0, 1).unwrap();
        assert!(g.value(out).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }
}
