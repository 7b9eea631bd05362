use crate::error::{Error, Result};
use crate::tensor::Precision;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Task head attached after the pooling back-end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Cosine class matrix for additive angular margin softmax.
    Aam { num_classes: usize },
    /// Single logit for binary cross-entropy.
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Small,
    Large,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "small" => Ok(Preset::Small),
            "large" => Ok(Preset::Large),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Large => "large",
        })
    }
}

/// Nominal architecture. The last conv layer always emits `d_model`
/// channels; the earlier ones are the gated front-end.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    /// Longest input (in frames) the positional table must cover.
    pub max_frames: usize,
    pub conv: Vec<ConvSpec>,
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_head: usize,
    pub ffn_dim: usize,
    pub pooling_heads: usize,
    pub pooling_dim: usize,
    pub embedding_dim: usize,
    pub head: HeadKind,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn preset(preset: Preset, feat_dim: usize, max_frames: usize, head: HeadKind) -> Self {
        let conv = |c: usize, k: usize, s: usize| ConvSpec {
            channels: c,
            kernel: k,
            stride: s,
        };
        match preset {
            Preset::Tiny => ModelConfig {
                feat_dim,
                max_frames,
                conv: vec![conv(4, 2, 1), conv(8, 2, 1)],
                num_layers: 1,
                d_model: 8,
                num_heads: 2,
                d_head: 4,
                ffn_dim: 8,
                pooling_heads: 2,
                pooling_dim: 4,
                embedding_dim: 4,
                head,
                precision: Precision::F64,
            },
            Preset::Small => ModelConfig {
                feat_dim,
                max_frames,
                conv: vec![conv(32, 3, 2), conv(64, 3, 2)],
                num_layers: 4,
                d_model: 64,
                num_heads: 4,
                d_head: 16,
                ffn_dim: 256,
                pooling_heads: 4,
                pooling_dim: 16,
                embedding_dim: 32,
                head,
                precision: Precision::F64,
            },
            Preset::Large => ModelConfig {
                feat_dim,
                max_frames,
                conv: vec![conv(32, 3, 2), conv(96, 3, 2)],
                num_layers: 8,
                d_model: 96,
                num_heads: 6,
                d_head: 16,
                ffn_dim: 384,
                pooling_heads: 4,
                pooling_dim: 16,
                embedding_dim: 32,
                head,
                precision: Precision::F64,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Model(m));
        if self.conv.is_empty() {
            return bad("at least one conv layer is required".into());
        }
        let extents = [
            self.feat_dim,
            self.max_frames,
            self.num_layers,
            self.d_model,
            self.num_heads,
            self.d_head,
            self.ffn_dim,
            self.pooling_heads,
            self.pooling_dim,
            self.embedding_dim,
        ];
        if extents.contains(&0) {
            return bad("all extents must be positive".into());
        }
        if self.conv.iter().any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0) {
            return bad("conv extents must be positive".into());
        }
        if self.d_model != self.num_heads * self.d_head {
            return bad(format!(
                "d_model {} != num_heads {} * d_head {}",
                self.d_model, self.num_heads, self.d_head
            ));
        }
        if self.conv.last().map(|c| c.channels) != Some(self.d_model) {
            return bad("last conv layer must emit d_model channels".into());
        }
        if let HeadKind::Aam { num_classes: 0 } = self.head {
            return bad("AAM head needs at least one class".into());
        }
        if self.frames_after_conv(self.max_frames).is_none() {
            return bad(format!("max_frames {} too short for the conv stack", self.max_frames));
        }
        Ok(())
    }

    /// Output length of the conv stack, or `None` if the input is too short.
    pub fn frames_after_conv(&self, mut len: usize) -> Option<usize> {
        for c in &self.conv {
            if len < c.kernel {
                return None;
            }
            len = (len - c.kernel) / c.stride + 1;
        }
        Some(len)
    }

    /// Rows of the learned positional table.
    pub fn positions(&self) -> usize {
        self.frames_after_conv(self.max_frames).unwrap_or(1)
    }

    /// Conv layers whose output channels carry gates (all but the last).
    pub fn gated_conv_layers(&self) -> usize {
        self.conv.len() - 1
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("feat_dim".to_string(), self.feat_dim.to_string()),
            ("max_frames".into(), self.max_frames.to_string()),
            (
                "conv".into(),
                self.conv
                    .iter()
                    .map(|c| format!("{}:{}:{}", c.channels, c.kernel, c.stride))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("num_layers".into(), self.num_layers.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("num_heads".into(), self.num_heads.to_string()),
            ("d_head".into(), self.d_head.to_string()),
            ("ffn_dim".into(), self.ffn_dim.to_string()),
            ("pooling_heads".into(), self.pooling_heads.to_string()),
            ("pooling_dim".into(), self.pooling_dim.to_string()),
            ("embedding_dim".into(), self.embedding_dim.to_string()),
        ];
        out.push((
            "head".into(),
            match self.head {
                HeadKind::Aam { num_classes } => format!("aam:{num_classes}"),
                HeadKind::Binary => "binary".into(),
            },
        ));
        out.push((
            "precision".into(),
            match self.precision {
                Precision::F64 => "f64".into(),
                Precision::F32 => "f32".into(),
            },
        ));
        out
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("model config lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("model config `{k}` is not an integer")))
        };
        let conv = get("conv")?
            .split(',')
            .map(|s| {
                let parts: Vec<usize> = s.split(':').filter_map(|p| p.parse().ok()).collect();
                match parts[..] {
                    [channels, kernel, stride] => Ok(ConvSpec {
                        channels,
                        kernel,
                        stride,
                    }),
                    _ => Err(Error::Checkpoint(format!("bad conv spec `{s}`"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let head = match get("head")? {
            "binary" => HeadKind::Binary,
            h => match h.strip_prefix("aam:").and_then(|n| n.parse().ok()) {
                Some(num_classes) => HeadKind::Aam { num_classes },
                None => return Err(Error::Checkpoint(format!("bad head `{h}`"))),
            },
        };
        let precision = match get("precision")? {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            p => return Err(Error::Checkpoint(format!("bad precision `{p}`"))),
        };
        let cfg = ModelConfig {
            feat_dim: num("feat_dim")?,
            max_frames: num("max_frames")?,
            conv,
            num_layers: num("num_layers")?,
            d_model: num("d_model")?,
            num_heads: num("num_heads")?,
            d_head: num("d_head")?,
            ffn_dim: num("ffn_dim")?,
            pooling_heads: num("pooling_heads")?,
            pooling_dim: num("pooling_dim")?,
            embedding_dim: num("embedding_dim")?,
            head,
            precision,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Actual per-layer widths; equal to the nominal config until compaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub conv: Vec<usize>,
    pub heads: Vec<usize>,
    pub ffn: Vec<usize>,
}

impl LayerDims {
    pub fn nominal(cfg: &ModelConfig) -> Self {
        LayerDims {
            conv: cfg.conv.iter().map(|c| c.channels).collect(),
            heads: vec![cfg.num_heads; cfg.num_layers],
            ffn: vec![cfg.ffn_dim; cfg.num_layers],
        }
    }

    /// Input channels seen by conv layer `l`.
    pub fn conv_in(&self, cfg: &ModelConfig, l: usize) -> usize {
        if l == 0 {
            cfg.feat_dim
        } else {
            self.conv[l - 1]
        }
    }
}
