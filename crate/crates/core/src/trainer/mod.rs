//! The joint training loop: descend on task loss plus sparsity penalty over
//! weights and gate parameters, then ascend on the multipliers.

mod adam;
mod config;

pub use adam::{adamw_update, Moments};
pub use config::{DataSize, TrainConfig};

use crate::checkpoint::{Checkpoint, TrainingState};
use crate::controller::ControllerState;
use crate::error::{Error, Result};
use crate::fabric::GateMode;
use crate::metrics::{self, DcfParams, RetentionPattern};
use crate::model::{HeadKind, PrunableModel};
use crate::objectives::{self, AamParams};
use crate::rng::{self, Domain};
use crate::synth::{self, Dataset, SpoofData, SvData, TaskKind};
use crate::tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const EVAL_CHUNK: usize = 64;

/// Generated data for one task.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskData {
    Sv(SvData),
    Spoof(SpoofData),
}

impl TaskData {
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.task {
            TaskKind::ToySv => TaskData::Sv(synth::gen_sv(&cfg.sv_spec())?),
            TaskKind::ToySpoof => TaskData::Spoof(synth::gen_spoof(&cfg.spoof_spec())?),
        })
    }

    pub fn train(&self) -> &Dataset {
        match self {
            TaskData::Sv(d) => &d.train,
            TaskData::Spoof(d) => &d.train,
        }
    }

    pub fn eval(&self) -> &Dataset {
        match self {
            TaskData::Sv(d) => &d.eval,
            TaskData::Spoof(d) => &d.eval,
        }
    }
}

/// Held-out metrics of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub eer: f64,
    pub min_dcf: f64,
    /// Binary task only.
    pub accuracy: Option<f64>,
}

/// Evaluates `model` on the held-out split: cosine-scored trials for the
/// verification task, logit scores for the spoof task.
pub fn evaluate(model: &PrunableModel, data: &TaskData, mode: GateMode<'_>) -> Result<EvalMetrics> {
    match data {
        TaskData::Sv(d) => {
            let emb = model.embed(&d.eval.inputs(), mode, EVAL_CHUNK)?;
            let scores = metrics::cosine_scores(&emb, &d.trials)?;
            Ok(EvalMetrics {
                eer: metrics::eer(&scores)?,
                min_dcf: metrics::min_dcf(&scores, DcfParams::default())?,
                accuracy: None,
            })
        }
        TaskData::Spoof(d) => {
            let logits = model.score_binary(&d.eval.inputs(), mode, EVAL_CHUNK)?;
            let labels: Vec<bool> = d.eval.labels.iter().map(|&y| y == 1).collect();
            let scores = metrics::binary_scores(logits.data(), &labels);
            Ok(EvalMetrics {
                eer: metrics::eer(&scores)?,
                min_dcf: metrics::min_dcf(&scores, DcfParams::default())?,
                accuracy: Some(objectives::binary_accuracy(logits.data(), &labels)),
            })
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Step(StepRecord),
    Eval(EvalRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: f64,
    pub task_loss: f64,
    pub reg_loss: f64,
    pub s_hat: f64,
    pub t_now: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: f64,
    pub s_hat: f64,
    pub eer: f64,
    pub min_dcf: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

/// Files of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.log")
    }
    pub fn retention(&self) -> PathBuf {
        self.root.join("retention.csv")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.csv")
    }
    pub fn last_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("last.ckpt")
    }
    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("final.ckpt")
    }
    pub fn compacted_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("compacted.ckpt")
    }
    pub fn plan(&self) -> PathBuf {
        self.root.join("plan.json")
    }
    pub fn diagnostic(&self) -> PathBuf {
        self.root.join("diagnostic.json")
    }
}

/// Model, gates, controller and optimizer state of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: PrunableModel,
    pub controller: ControllerState,
    pub data: TaskData,
    moments: Vec<Moments>,
    gate_moments: Moments,
    adam_step: u64,
    step: u64,
    steps_per_epoch: u64,
    order: Option<(u64, Vec<usize>)>,
    diagnostic: Option<PathBuf>,
}

fn order_for_epoch(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream_rng(seed, Domain::Shuffle, epoch));
    idx
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    step: u64,
    reason: &'a str,
    task_loss: f64,
    reg_loss: f64,
    s_hat: f64,
    lambda1: f64,
    lambda2: f64,
    log_alpha_min: f64,
    log_alpha_max: f64,
    log_alpha_mean: f64,
    batch_indices: &'a [usize],
    batch_labels: Vec<usize>,
    batch_shape: &'a [usize],
    batch: &'a [f64],
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = TaskData::generate(&config)?;
        let model = PrunableModel::new(config.model_config(), config.seed, true)?;
        let controller = ControllerState::new(config.target, config.warmup_epochs, config.lr_multipliers)?;
        Self::assemble(config, model, controller, data, None)
    }

    fn assemble(
        config: TrainConfig,
        model: PrunableModel,
        controller: ControllerState,
        data: TaskData,
        state: Option<&TrainingState>,
    ) -> Result<Self> {
        let n = data.train().len();
        if n < config.batch_size {
            return Err(Error::Config(format!("batch_size {} exceeds {n} training utterances", config.batch_size)));
        }
        let gates = model.fabric.as_ref().map_or(0, |f| f.len());
        let mut t = Trainer {
            moments: model.params.iter().map(|(_, t)| Moments::zeros(t.numel())).collect(),
            gate_moments: Moments::zeros(gates),
            adam_step: 0,
            step: 0,
            steps_per_epoch: (n / config.batch_size) as u64,
            order: None,
            diagnostic: None,
            config,
            model,
            controller,
            data,
        };
        if let Some(s) = state {
            if s.moments.len() != t.moments.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
            }
            t.moments = s.moments.clone();
            if let Some(g) = &s.gate_moments {
                t.gate_moments = g.clone();
            }
            t.adam_step = s.adam_step;
            t.step = s.step;
        }
        Ok(t)
    }

    /// Restores a run from a training checkpoint; the data is regenerated
    /// from the stored configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let state = ckpt
            .training
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no training state".into()))?;
        if ckpt.compacted || ckpt.model.fabric.is_none() {
            return Err(Error::Checkpoint("cannot resume training from a compacted model".into()));
        }
        let config = TrainConfig::from_text(&ckpt.train_config)?;
        let data = TaskData::generate(&config)?;
        Self::assemble(config, ckpt.model.clone(), state.controller, data, Some(state))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            compacted: false,
            train_config: self.config.to_text(),
            training: Some(TrainingState {
                controller: self.controller,
                step: self.step,
                adam_step: self.adam_step,
                moments: self.moments.clone(),
                gate_moments: Some(self.gate_moments.clone()),
                seed: self.config.seed,
            }),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        (self.config.epochs * self.steps_per_epoch as f64).round() as u64
    }

    pub fn epoch_progress(&self) -> f64 {
        self.step as f64 / self.steps_per_epoch as f64
    }

    /// Where to write a diagnostic dump if a step diverges.
    pub fn set_diagnostic_path(&mut self, path: Option<PathBuf>) {
        self.diagnostic = path;
    }

    /// Training indices used at `step`.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let epoch = step / self.steps_per_epoch;
        let pos = (step % self.steps_per_epoch) as usize;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, order_for_epoch(self.config.seed, epoch, self.data.train().len())));
        }
        let order = &self.order.as_ref().expect("order cached").1;
        let b = self.config.batch_size;
        order[pos * b..(pos + 1) * b].to_vec()
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let idx = self.batch_indices(self.step);
        self.train_step_on(&idx)
    }

    /// One descent step on the batch `idx`, then one multiplier ascent
    /// using the expected sparsity from before the descent.
    pub fn train_step_on(&mut self, idx: &[usize]) -> Result<StepRecord> {
        let cfg = &self.config;
        let progress = self.epoch_progress();
        let t_now = self.controller.scheduled_target(progress);
        let train = self.data.train();
        let x = train.batch(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();

        let mut g = Graph::with_precision(self.model.config.precision);
        let bound = self.model.bind(&mut g, true)?;
        let fabric = self.model.fabric.as_ref();
        let uniforms = fabric.map(|f| f.draw_uniforms(cfg.seed, self.step)).unwrap_or_default();
        let mode = if fabric.is_some() {
            GateMode::Train { uniforms: &uniforms }
        } else {
            GateMode::Eval
        };
        let fwd = self.model.forward(&mut g, &bound, &x, mode)?;
        let task = match self.model.config.head {
            HeadKind::Aam { .. } => {
                let w = self.model.aam_weight(&bound)?;
                let p = AamParams::new(cfg.aam_margin, cfg.aam_scale)?;
                objectives::aam_loss(&mut g, fwd.embedding, w, &labels, p)?
            }
            HeadKind::Binary => {
                let logits = self.model.binary_logits(&mut g, &bound, fwd.embedding)?;
                let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                objectives::bce_loss(&mut g, logits, &y)?
            }
        };
        let (total, reg, s_hat) = match (fabric, bound.log_alpha) {
            (Some(f), Some(la)) => {
                let s = f.expected_sparsity_var(&mut g, la)?;
                let r = self.controller.regularizer(&mut g, s, t_now)?;
                (g.add(task, r)?, Some(r), Some(s))
            }
            _ => (task, None, None),
        };
        let task_loss = g.value(task).item();
        let reg_loss = reg.map_or(0.0, |r| g.value(r).item());
        let s_hat = s_hat.map_or(0.0, |s| g.value(s).item());
        if !(task_loss.is_finite() && reg_loss.is_finite()) {
            return Err(self.diverged("non-finite loss", idx, &x, task_loss, reg_loss, s_hat));
        }

        let mut grads = g.backward(total)?;
        let mut flat: Vec<Vec<f64>> = bound
            .params
            .iter()
            .zip(self.model.params.iter())
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        let mut gate_grad = match bound.log_alpha {
            Some(la) => grads.take(la).unwrap_or_else(|| vec![0.0; self.gate_moments.m.len()]),
            None => Vec::new(),
        };
        let norm = flat
            .iter()
            .chain(std::iter::once(&gate_grad))
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(self.diverged("non-finite gradient", idx, &x, task_loss, reg_loss, s_hat));
        }
        if norm > cfg.grad_clip {
            let k = cfg.grad_clip / norm;
            flat.iter_mut().chain(std::iter::once(&mut gate_grad)).for_each(|v| v.iter_mut().for_each(|x| *x *= k));
        }

        self.adam_step += 1;
        let (lr_w, lr_g, wd) = (cfg.lr_weights, cfg.lr_gates, cfg.weight_decay);
        for (i, gr) in flat.iter().enumerate() {
            adamw_update(self.model.params.tensor_mut(i).data_mut(), gr, &mut self.moments[i], self.adam_step, lr_w, wd);
        }
        if let Some(f) = self.model.fabric.as_mut() {
            adamw_update(f.log_alpha_mut(), &gate_grad, &mut self.gate_moments, self.adam_step, lr_g, 0.0);
        }
        if self.model.fabric.is_some() {
            self.controller.ascend_multipliers(s_hat, t_now);
        }
        let rec = StepRecord {
            step: self.step,
            epoch: progress,
            task_loss,
            reg_loss,
            s_hat,
            t_now,
            lambda1: self.controller.lambda1,
            lambda2: self.controller.lambda2,
            lr: lr_w,
        };
        self.step += 1;
        Ok(rec)
    }

    #[allow(clippy::too_many_arguments)]
    fn diverged(&self, reason: &str, idx: &[usize], x: &Tensor, task_loss: f64, reg_loss: f64, s_hat: f64) -> Error {
        let la = self.model.fabric.as_ref().map(|f| f.log_alpha().to_vec()).unwrap_or_default();
        let finite = |v: f64| if v.is_finite() { v } else { f64::NAN };
        let mut msg = format!("{reason} at step {}", self.step);
        if let Some(path) = &self.diagnostic {
            let d = Diagnostic {
                step: self.step,
                reason,
                task_loss,
                reg_loss,
                s_hat,
                lambda1: self.controller.lambda1,
                lambda2: self.controller.lambda2,
                log_alpha_min: la.iter().copied().fold(f64::INFINITY, f64::min),
                log_alpha_max: la.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                log_alpha_mean: finite(la.iter().sum::<f64>() / la.len().max(1) as f64),
                batch_indices: idx,
                batch_labels: idx.iter().map(|&i| self.data.train().labels[i]).collect(),
                batch_shape: x.shape(),
                batch: x.data(),
            };
            // serde_json writes non-finite floats as null
            match serde_json::to_vec_pretty(&d).map(|b| fs::write(path, b)) {
                Ok(Ok(())) => msg.push_str(&format!("; diagnostic written to {}", path.display())),
                _ => msg.push_str("; writing the diagnostic failed"),
            }
        }
        Error::Divergence(msg)
    }

    pub fn evaluate(&self) -> Result<EvalRecord> {
        let m = evaluate(&self.model, &self.data, GateMode::Eval)?;
        Ok(EvalRecord {
            step: self.step,
            epoch: self.epoch_progress(),
            s_hat: self.model.fabric.as_ref().map_or(0.0, |f| f.expected_sparsity()),
            eer: m.eer,
            min_dcf: m.min_dcf,
            accuracy: m.accuracy,
        })
    }

    /// Trains until `stop` steps (capped at the configured total), appending
    /// to the run directory's metrics log and refreshing `last.ckpt` at
    /// every epoch boundary.
    pub fn run_until(&mut self, dir: &RunDir, stop: u64) -> Result<()> {
        let stop = stop.min(self.total_steps());
        let path = dir.metrics();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut log = BufWriter::new(file);
        let write = |log: &mut BufWriter<File>, r: &Record| -> Result<()> {
            let line = serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&path, e))
        };
        let eval_period = (self.config.eval_every * self.steps_per_epoch as f64).round() as u64;
        self.diagnostic.get_or_insert_with(|| dir.diagnostic());
        while self.step < stop {
            let rec = self.train_step()?;
            write(&mut log, &Record::Step(rec))?;
            if eval_period > 0 && self.step % eval_period == 0 && self.step < self.total_steps() {
                write(&mut log, &Record::Eval(self.evaluate()?))?;
            }
            if self.step % self.steps_per_epoch == 0 {
                log.flush().map_err(|e| Error::io(dir.metrics(), e))?;
                self.checkpoint().save(&dir.last_checkpoint())?;
            }
        }
        if self.step == self.total_steps() {
            write(&mut log, &Record::Eval(self.evaluate()?))?;
        }
        log.flush().map_err(|e| Error::io(dir.metrics(), e))?;
        Ok(())
    }

    /// Finishes the run: final checkpoint and retention pattern.
    pub fn finish(&self, dir: &RunDir) -> Result<()> {
        self.checkpoint().save(&dir.final_checkpoint())?;
        if let Some(f) = &self.model.fabric {
            let csv = RetentionPattern::from_fabric(f).to_csv();
            fs::write(dir.retention(), csv).map_err(|e| Error::io(dir.retention(), e))?;
        }
        Ok(())
    }
}

/// Runs a full training job into `config.out_dir`.
pub fn fit(config: &TrainConfig) -> Result<Trainer> {
    fit_with(config, |_| {})
}

/// As [`fit`], calling `on_epoch` after every epoch (and the final step).
pub fn fit_with(config: &TrainConfig, on_epoch: impl FnMut(&Trainer)) -> Result<Trainer> {
    let dir = RunDir::create(&config.out_dir)?;
    fs::write(dir.config(), config.to_text()).map_err(|e| Error::io(dir.config(), e))?;
    let metrics = dir.metrics();
    if metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| Error::io(&metrics, e))?;
    }
    let mut t = Trainer::new(config.clone())?;
    t.run_epochs(&dir, on_epoch)?;
    Ok(t)
}

/// Continues a run from `checkpoint` into the run directory `root`. Log
/// records written after the checkpoint are dropped first.
pub fn resume(checkpoint: &Path, root: &Path, on_epoch: impl FnMut(&Trainer)) -> Result<Trainer> {
    let dir = RunDir::create(root)?;
    let mut t = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let metrics = dir.metrics();
    if metrics.exists() {
        let at = t.step();
        let kept: Vec<Record> = read_metrics(&metrics)?
            .into_iter()
            .filter(|r| match r {
                Record::Step(s) => s.step < at,
                Record::Eval(e) => e.step <= at,
            })
            .collect();
        let mut text = String::new();
        for r in &kept {
            text.push_str(&serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?);
            text.push('\n');
        }
        fs::write(&metrics, text).map_err(|e| Error::io(&metrics, e))?;
    }
    fs::write(dir.config(), t.config.to_text()).map_err(|e| Error::io(dir.config(), e))?;
    t.run_epochs(&dir, on_epoch)?;
    Ok(t)
}

impl Trainer {
    fn run_epochs(&mut self, dir: &RunDir, mut on_epoch: impl FnMut(&Trainer)) -> Result<()> {
        let total = self.total_steps();
        while self.step < total {
            let next = (self.step / self.steps_per_epoch + 1) * self.steps_per_epoch;
            self.run_until(dir, next.min(total))?;
            on_epoch(self);
        }
        self.finish(dir)
    }
}

/// Parses a metrics log back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Serde(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}
