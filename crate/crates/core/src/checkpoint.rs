//! Versioned little-endian checkpoint files. The byte layout is described
//! in `docs/checkpoint-format.md`.

use crate::controller::ControllerState;
use crate::error::{Error, Result};
use crate::fabric::{GateFabric, GroupKind, SharedSlice, StructuralGroup};
use crate::hard_concrete::GateShape;
use crate::model::{LayerDims, ModelConfig, ParamStore, PrunableModel};
use crate::tensor::Tensor;
use crate::trainer::Moments;
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"HPCKPT\0\0";
pub const VERSION: u32 = 1;

const FLAG_GATED: u32 = 1;
const FLAG_COMPACTED: u32 = 2;
const FLAG_TRAINING: u32 = 4;

/// Optimizer, controller and counter state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub controller: ControllerState,
    pub step: u64,
    pub adam_step: u64,
    pub moments: Vec<Moments>,
    pub gate_moments: Option<Moments>,
    /// All randomness is counter-based, so the seed plus `step` is the
    /// complete generator state.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PrunableModel,
    pub compacted: bool,
    /// Training configuration as `key = value` text (empty if unknown).
    pub train_config: String,
    pub training: Option<TrainingState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn u32s(&mut self, v: &[usize]) {
        self.u32(v.len());
        v.iter().for_each(|&x| self.u32(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt file ({what})"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "u64")?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, "f64")?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return Err(corrupt("f64 array"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n, "string")?.to_vec()).map_err(|_| corrupt("utf-8"))
    }
    fn u32s(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        if n.saturating_mul(4) > self.buf.len() - self.pos {
            return Err(corrupt("u32 array"));
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

/// FNV-1a over the payload, stored as the trailing 8 bytes.
fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn kind_code(k: GroupKind) -> u8 {
    match k {
        GroupKind::ConvChannel => 0,
        GroupKind::MhsaHead => 1,
        GroupKind::FfnNeuron => 2,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        let mut flags = 0;
        if m.fabric.is_some() {
            flags |= FLAG_GATED;
        }
        if self.compacted {
            flags |= FLAG_COMPACTED;
        }
        if self.training.is_some() {
            flags |= FLAG_TRAINING;
        }
        w.u32(flags as usize);
        let model_text: String = m.config.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        w.str(&model_text);
        w.str(&self.train_config);
        w.u32s(&m.dims.conv);
        w.u32s(&m.dims.heads);
        w.u32s(&m.dims.ffn);
        w.u32(m.params.len());
        for (name, t) in m.params.iter() {
            w.str(name);
            w.u32s(t.shape());
            w.f64s(t.data());
        }
        if let Some(f) = &m.fabric {
            let s = f.shape();
            w.f64s(&[s.beta, s.gamma, s.zeta]);
            w.u64(f.fixed_params() as u64);
            w.u64(f.total_params() as u64);
            w.u32(f.len());
            for g in f.groups() {
                w.u8(kind_code(g.kind));
                w.u32(g.layer);
                w.u32(g.unit);
                w.u64(g.owned as u64);
                w.u32(g.shared.len());
                for s in &g.shared {
                    w.u32(s.partner);
                    w.u64(s.count as u64);
                }
            }
            w.f64s(f.log_alpha());
        }
        if let Some(t) = &self.training {
            let c = &t.controller;
            w.f64s(&[c.lambda1, c.lambda2, c.target_final, c.warmup_epochs, c.multiplier_lr]);
            w.u64(t.step);
            w.u64(t.adam_step);
            w.u64(t.seed);
            for mom in &t.moments {
                w.f64s(&mom.m);
                w.f64s(&mom.v);
            }
            if let Some(g) = &t.gate_moments {
                w.f64s(&g.m);
                w.f64s(&g.v);
            }
        }
        let sum = checksum(&w.0);
        w.u64(sum);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 || &buf[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (payload, tail) = buf.split_at(buf.len() - 8);
        if checksum(payload) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: payload, pos: 8 };
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let flags = r.u32()? as u32;
        let model_text = r.str()?;
        let pairs: Vec<(String, String)> = model_text
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        let config = ModelConfig::from_pairs(&pairs)?;
        let train_config = r.str()?;
        let dims = LayerDims {
            conv: r.u32s()?,
            heads: r.u32s()?,
            ffn: r.u32s()?,
        };
        if dims.conv.len() != config.conv.len() || dims.heads.len() != config.num_layers || dims.ffn.len() != config.num_layers {
            return Err(Error::Checkpoint("layer widths do not match the model config".into()));
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let shape = r.u32s()?;
            let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| corrupt("shape"))?;
            let data = r.f64s(n)?;
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        let fabric = if flags & FLAG_GATED != 0 {
            let s = r.f64s(3)?;
            let shape = GateShape::new(s[0], s[1], s[2])?;
            let fixed = r.u64()? as usize;
            let total = r.u64()? as usize;
            let n = r.u32()?;
            let mut groups = Vec::with_capacity(n.min(1 << 20));
            for id in 0..n {
                let kind = match r.u8()? {
                    0 => GroupKind::ConvChannel,
                    1 => GroupKind::MhsaHead,
                    2 => GroupKind::FfnNeuron,
                    k => return Err(Error::Checkpoint(format!("unknown group kind {k}"))),
                };
                let layer = r.u32()?;
                let unit = r.u32()?;
                let owned = r.u64()? as usize;
                let shared = (0..r.u32()?)
                    .map(|_| {
                        Ok(SharedSlice {
                            partner: r.u32()?,
                            count: r.u64()? as usize,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                groups.push(StructuralGroup {
                    id,
                    kind,
                    layer,
                    unit,
                    owned,
                    shared,
                });
            }
            let mut f = GateFabric::new(groups, fixed, total, shape, 0.0)?;
            let la = r.f64s(n)?;
            f.set_log_alpha(&la)?;
            Some(f)
        } else {
            None
        };
        let model = PrunableModel {
            config,
            dims,
            params,
            fabric,
        };
        if let Some(f) = &model.fabric {
            if f.total_params() != model.count_params() {
                return Err(Error::Checkpoint("fabric accounting does not match the parameters".into()));
            }
        }
        let training = if flags & FLAG_TRAINING != 0 {
            let c = r.f64s(5)?;
            let controller = ControllerState {
                lambda1: c[0],
                lambda2: c[1],
                target_final: c[2],
                warmup_epochs: c[3],
                multiplier_lr: c[4],
            };
            let step = r.u64()?;
            let adam_step = r.u64()?;
            let seed = r.u64()?;
            let sizes: Vec<usize> = model.params.iter().map(|(_, t)| t.numel()).collect();
            let moments = sizes
                .iter()
                .map(|&n| Ok(Moments { m: r.f64s(n)?, v: r.f64s(n)? }))
                .collect::<Result<Vec<_>>>()?;
            let gate_moments = match &model.fabric {
                Some(f) => Some(Moments {
                    m: r.f64s(f.len())?,
                    v: r.f64s(f.len())?,
                }),
                None => None,
            };
            Some(TrainingState {
                controller,
                step,
                adam_step,
                moments,
                gate_moments,
                seed,
            })
        } else {
            None
        };
        if r.pos != payload.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        Ok(Checkpoint {
            model,
            compacted: flags & FLAG_COMPACTED != 0,
            train_config,
            training,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, Preset};

    fn sample() -> Checkpoint {
        let mut model = PrunableModel::new(ModelConfig::preset(Preset::Tiny, 3, 6, HeadKind::Aam { num_classes: 5 }), 4, true).unwrap();
        model.fabric.as_mut().unwrap().log_alpha_mut()[3] = -1.25;
        let moments = model.params.iter().map(|(_, t)| Moments { m: vec![0.5; t.numel()], v: vec![0.25; t.numel()] }).collect();
        let g = model.fabric.as_ref().unwrap().len();
        Checkpoint {
            model,
            compacted: false,
            train_config: "seed = 3\n".into(),
            training: Some(TrainingState {
                controller: ControllerState::new(0.5, 5.0, 0.02).unwrap(),
                step: 17,
                adam_step: 17,
                moments,
                gate_moments: Some(Moments::zeros(g)),
                seed: 3,
            }),
        }
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..n - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"HPCKPT\0\0garbage!").is_err());
    }
}
