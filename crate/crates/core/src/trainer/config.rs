use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig, Preset};
use crate::synth::{SpoofTaskSpec, SvTaskSpec, TaskKind};
use crate::tensor::Precision;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Size variant of the synthetic verification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSize {
    Full,
    Small,
}

impl FromStr for DataSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(DataSize::Full),
            "small" => Ok(DataSize::Small),
            other => Err(Error::Config(format!("unknown data size `{other}`"))),
        }
    }
}

impl std::fmt::Display for DataSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSize::Full => "full",
            DataSize::Small => "small",
        })
    }
}

/// Everything needed to reproduce a training run. Serialized as flat
/// `key = value` text whose keys are the field names.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub preset: Preset,
    pub data_size: DataSize,
    /// Final target sparsity `t`.
    pub target: f64,
    pub epochs: f64,
    pub warmup_epochs: f64,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_gates: f64,
    pub lr_multipliers: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub aam_margin: f64,
    pub aam_scale: f64,
    /// Seeds initialization, gate noise and shuffling.
    pub seed: u64,
    /// Seeds the synthetic data, independent of `seed`.
    pub data_seed: u64,
    /// Evaluate every this many epochs (0 disables periodic evaluation).
    pub eval_every: f64,
    pub spoof_amplitude: f64,
    pub precision: Precision,
    /// Accepted for completeness; compaction never fine-tunes afterwards.
    pub recovery_epochs: f64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: TaskKind::ToySv,
            preset: Preset::Small,
            data_size: DataSize::Full,
            target: 0.5,
            epochs: 8.0,
            warmup_epochs: 5.0,
            batch_size: 16,
            lr_weights: 1e-3,
            lr_gates: 2e-2,
            lr_multipliers: 0.5,
            weight_decay: 0.01,
            grad_clip: 5.0,
            aam_margin: 0.2,
            aam_scale: 32.0,
            seed: 0,
            data_seed: 0,
            eval_every: 1.0,
            spoof_amplitude: 0.05,
            precision: Precision::F64,
            recovery_epochs: 0.0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

const KEYS: &[&str] = &[
    "task",
    "preset",
    "data_size",
    "target",
    "epochs",
    "warmup_epochs",
    "batch_size",
    "lr_weights",
    "lr_gates",
    "lr_multipliers",
    "weight_decay",
    "grad_clip",
    "aam_margin",
    "aam_scale",
    "seed",
    "data_seed",
    "eval_every",
    "spoof_amplitude",
    "precision",
    "recovery_epochs",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "task" => self.task = v.parse()?,
            "preset" => self.preset = v.parse()?,
            "data_size" => self.data_size = v.parse()?,
            "target" => self.target = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_weights" => self.lr_weights = parse(key, v)?,
            "lr_gates" => self.lr_gates = parse(key, v)?,
            "lr_multipliers" => self.lr_multipliers = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "aam_margin" => self.aam_margin = parse(key, v)?,
            "aam_scale" => self.aam_scale = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "spoof_amplitude" => self.spoof_amplitude = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(Error::Config(format!("invalid precision `{v}`"))),
                }
            }
            "recovery_epochs" => self.recovery_epochs = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "task" => self.task.to_string(),
            "preset" => self.preset.to_string(),
            "data_size" => self.data_size.to_string(),
            "target" => self.target.to_string(),
            "epochs" => self.epochs.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_weights" => self.lr_weights.to_string(),
            "lr_gates" => self.lr_gates.to_string(),
            "lr_multipliers" => self.lr_multipliers.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "aam_margin" => self.aam_margin.to_string(),
            "aam_scale" => self.aam_scale.to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "spoof_amplitude" => self.spoof_amplitude.to_string(),
            "precision" => match self.precision {
                Precision::F64 => "f64".into(),
                Precision::F32 => "f32".into(),
            },
            "recovery_epochs" => self.recovery_epochs.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            other => return Err(Error::UnknownKey(other.to_string())),
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.target) {
            return bad(format!("target {} outside [0, 1)", self.target));
        }
        for (k, v) in [
            ("lr_multipliers", self.lr_multipliers),
            ("epochs", self.epochs),
            ("warmup_epochs", self.warmup_epochs),
            ("grad_clip", self.grad_clip),
            ("aam_scale", self.aam_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("`{k}` must be positive, got {v}"));
            }
        }
        for (k, v) in [
            ("lr_weights", self.lr_weights),
            ("lr_gates", self.lr_gates),
            ("weight_decay", self.weight_decay),
            ("eval_every", self.eval_every),
            ("spoof_amplitude", self.spoof_amplitude),
            ("recovery_epochs", self.recovery_epochs),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("`{k}` must be nonnegative, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn sv_spec(&self) -> SvTaskSpec {
        let base = match self.data_size {
            DataSize::Full => SvTaskSpec::default(),
            DataSize::Small => SvTaskSpec::small_data(),
        };
        SvTaskSpec {
            seed: self.data_seed,
            ..base
        }
    }

    pub fn spoof_spec(&self) -> SpoofTaskSpec {
        let base = SpoofTaskSpec::default();
        let (train_count, eval_count) = match self.data_size {
            DataSize::Full => (base.train_count, base.eval_count),
            DataSize::Small => (base.train_count / 2, base.eval_count),
        };
        SpoofTaskSpec {
            amplitude: self.spoof_amplitude,
            train_count,
            eval_count,
            seed: self.data_seed,
            ..base
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let (feat, frames, head) = match self.task {
            TaskKind::ToySv => {
                let s = self.sv_spec();
                (s.feat_dim, s.frames, HeadKind::Aam {
                    num_classes: s.train_classes(),
                })
            }
            TaskKind::ToySpoof => {
                let s = self.spoof_spec();
                (s.feat_dim, s.frames, HeadKind::Binary)
            }
        };
        let mut m = ModelConfig::preset(self.preset, feat, frames, head);
        m.precision = self.precision;
        m
    }
}
