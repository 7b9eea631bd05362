//! End-to-end commands: finalize a trained run, evaluate checkpoints,
//! summarize run directories and sweep target sparsities.

use crate::checkpoint::Checkpoint;
use crate::compactor::{self, CompactionPlan, EquivalenceReport};
use crate::error::{Error, Result};
use crate::fabric::GateMode;
use crate::metrics::{median, RetentionPattern};
use crate::model::PrunableModel;
use crate::synth::{self, SvData, TaskKind};
use crate::trainer::{self, read_metrics, EvalMetrics, Record, RunDir, TaskData, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Probe utterances used to verify a compaction.
pub const PROBE_INPUTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeReport {
    pub target: f64,
    pub expected_sparsity: f64,
    /// Sparsity of the plain "deterministic gate > 0" cut.
    pub threshold_sparsity: f64,
    pub realized_sparsity: f64,
    pub original_params: usize,
    pub compacted_params: usize,
    pub original_flops: u64,
    pub compacted_flops: u64,
    pub equivalence: EquivalenceReport,
    pub plan: CompactionPlan,
}

/// Binarizes, compacts and verifies. Fails without producing a model if
/// the compacted forward disagrees with the gated one.
pub fn finalize_model(model: &PrunableModel, target: f64, probe_seed: u64) -> Result<(PrunableModel, FinalizeReport)> {
    let fabric = model
        .fabric
        .as_ref()
        .ok_or_else(|| Error::Compaction("model is already compacted".into()))?;
    let reference_len = model.config.max_frames;
    let threshold: Vec<bool> = fabric.deterministic_gates().iter().map(|&z| z > 0.0).collect();
    let keep = compactor::binarize(fabric, target);
    let plan = compactor::plan_from_keep(model, &keep, reference_len)?;
    let compacted = compactor::compact(model, &plan)?;
    let probe = compactor::probe_inputs(model, PROBE_INPUTS, reference_len, probe_seed);
    let equivalence = compactor::verify_equivalence(model, &keep, &compacted, &probe)?;
    if !equivalence.passed {
        return Err(Error::Compaction(format!(
            "compacted model deviates by {:e}; refusing to emit it",
            equivalence.max_abs_diff
        )));
    }
    if compacted.count_params() != plan.realized_params {
        return Err(Error::Compaction(format!(
            "compacted model has {} parameters but the plan accounts for {}",
            compacted.count_params(),
            plan.realized_params
        )));
    }
    let report = FinalizeReport {
        target,
        expected_sparsity: fabric.expected_sparsity(),
        threshold_sparsity: fabric.realized_sparsity(&threshold),
        realized_sparsity: plan.realized_sparsity,
        original_params: model.count_params(),
        compacted_params: compacted.count_params(),
        original_flops: model.count_flops(reference_len)?,
        compacted_flops: compacted.count_flops(reference_len)?,
        equivalence,
        plan,
    };
    Ok((compacted, report))
}

/// Finalizes the checkpoint at `path`, writing the compacted checkpoint,
/// the plan, and the retention pattern next to it in `dir`.
pub fn finalize(path: &Path, target: Option<f64>, dir: &Path) -> Result<FinalizeReport> {
    let ckpt = Checkpoint::load(path)?;
    let target = match target {
        Some(t) => t,
        None => TrainConfig::from_text(&ckpt.train_config)?.target,
    };
    let seed = ckpt.training.as_ref().map_or(0, |t| t.seed);
    let (compacted, report) = finalize_model(&ckpt.model, target, seed)?;
    let run = RunDir::create(dir)?;
    Checkpoint {
        model: compacted,
        compacted: true,
        train_config: ckpt.train_config.clone(),
        training: None,
    }
    .save(&run.compacted_checkpoint())?;
    let fabric = ckpt.model.fabric.as_ref().expect("finalize checked gates");
    let keep = compactor::plan_keep(&ckpt.model, &report.plan)?;
    write(&run.retention(), &RetentionPattern::from_keep(fabric, &keep)?.to_csv())?;
    write(&run.plan(), &to_json(&report)?)?;
    Ok(report)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Serde(e.to_string()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub compacted: bool,
    pub params: usize,
    pub flops: u64,
    pub expected_sparsity: Option<f64>,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

/// Evaluates a checkpoint (gated in deterministic mode, or compacted) on
/// the requested split of its task data.
pub fn eval_checkpoint(path: &Path, split: Split) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = TrainConfig::from_text(&ckpt.train_config)?;
    let mut data = TaskData::generate(&cfg)?;
    if split == Split::Train {
        data = match data {
            TaskData::Sv(d) => {
                let trials = synth::make_trials(&d.train.labels, cfg.data_seed);
                TaskData::Sv(SvData {
                    eval: d.train.clone(),
                    train: d.train,
                    trials,
                })
            }
            TaskData::Spoof(mut d) => {
                d.eval = d.train.clone();
                TaskData::Spoof(d)
            }
        };
    }
    let m = &ckpt.model;
    Ok(EvalReport {
        task: cfg.task,
        compacted: ckpt.compacted,
        params: m.count_params(),
        flops: m.count_flops(m.config.max_frames)?,
        expected_sparsity: m.fabric.as_ref().map(|f| f.expected_sparsity()),
        metrics: trainer::evaluate(m, &data, GateMode::Eval)?,
    })
}

/// Joins the metrics log, retention export and finalization report of a
/// run directory into `summary.csv`; returns a printable table.
pub fn report(root: &Path) -> Result<String> {
    let run = RunDir { root: root.to_path_buf() };
    let records = read_metrics(&run.metrics())?;
    let finalized: Option<FinalizeReport> = match fs::read_to_string(run.plan()) {
        Ok(s) => Some(serde_json::from_str(&s).map_err(|e| Error::Serde(e.to_string()))?),
        Err(_) => None,
    };
    let mut csv = String::from("source,step,epoch,expected_sparsity,realized_sparsity,params,flops,eer,min_dcf,accuracy\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut last_step = None;
    for r in &records {
        match r {
            Record::Eval(e) => {
                let _ = writeln!(
                    csv,
                    "eval,{},{:.4},{:.6},,,,{:.6},{:.6},{}",
                    e.step,
                    e.epoch,
                    e.s_hat,
                    e.eer,
                    e.min_dcf,
                    opt(e.accuracy)
                );
            }
            Record::Step(s) => last_step = Some(*s),
        }
    }
    let mut text = String::new();
    if let Some(s) = last_step {
        let _ = writeln!(
            text,
            "steps: {}  final task loss {:.4}  s_hat {:.4}  t {:.4}  lambda1 {:.4}  lambda2 {:.4}",
            s.step + 1,
            s.task_loss,
            s.s_hat,
            s.t_now,
            s.lambda1,
            s.lambda2
        );
    }
    if let Some(f) = &finalized {
        if let Ok(ckpt) = Checkpoint::load(&run.compacted_checkpoint()) {
            if let Ok(e) = eval_checkpoint(&run.compacted_checkpoint(), Split::Eval) {
                let _ = writeln!(
                    csv,
                    "compacted,,,{:.6},{:.6},{},{},{:.6},{:.6},{}",
                    f.expected_sparsity,
                    f.realized_sparsity,
                    ckpt.model.count_params(),
                    f.compacted_flops,
                    e.metrics.eer,
                    e.metrics.min_dcf,
                    opt(e.metrics.accuracy)
                );
            }
        }
        let _ = writeln!(
            text,
            "finalized: target {:.3}  realized sparsity {:.4}  params {} -> {}  flops {} -> {}  max diff {:e}",
            f.target,
            f.realized_sparsity,
            f.original_params,
            f.compacted_params,
            f.original_flops,
            f.compacted_flops,
            f.equivalence.max_abs_diff
        );
    }
    let _ = writeln!(text, "\n{csv}");
    if let Ok(ret) = fs::read_to_string(run.retention()) {
        let _ = writeln!(text, "retention:\n{ret}");
    }
    write(&run.summary(), &csv)?;
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: f64,
    pub seed: u64,
    pub expected_sparsity: f64,
    pub realized_sparsity: f64,
    pub params: usize,
    pub flops: u64,
    pub eer: f64,
    pub min_dcf: f64,
    pub retention: RetentionPattern,
    pub run_dir: PathBuf,
}

/// Trains, finalizes and evaluates one run per `(target, seed)` under
/// `root/t{target}_s{seed}`.
pub fn sweep(base: &TrainConfig, targets: &[f64], seeds: &[u64], root: &Path) -> Result<Vec<SweepRow>> {
    sweep_with(base, targets, seeds, root, |_| {})
}

/// As [`sweep`], reporting each finished cell to `on_row`.
pub fn sweep_with(
    base: &TrainConfig,
    targets: &[f64],
    seeds: &[u64],
    root: &Path,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(targets.len() * seeds.len());
    for &t in targets {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.target = t;
            cfg.seed = seed;
            cfg.out_dir = root.join(format!("t{t}_s{seed}"));
            cfg.validate()?;
            let row = sweep_one(&cfg)?;
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// One sweep cell: fit, finalize at the run's target, evaluate compacted.
pub fn sweep_one(cfg: &TrainConfig) -> Result<SweepRow> {
    let trainer = trainer::fit(cfg)?;
    let run = RunDir::create(&cfg.out_dir)?;
    let report = finalize(&run.final_checkpoint(), Some(cfg.target), &cfg.out_dir)?;
    let compacted = Checkpoint::load(&run.compacted_checkpoint())?.model;
    let metrics = trainer::evaluate(&compacted, &trainer.data, GateMode::Eval)?;
    let fabric = trainer.model.fabric.as_ref().expect("trained model is gated");
    let keep = compactor::plan_keep(&trainer.model, &report.plan)?;
    Ok(SweepRow {
        target: cfg.target,
        seed: cfg.seed,
        expected_sparsity: report.expected_sparsity,
        realized_sparsity: report.realized_sparsity,
        params: report.compacted_params,
        flops: report.compacted_flops,
        eer: metrics.eer,
        min_dcf: metrics.min_dcf,
        retention: RetentionPattern::from_keep(fabric, &keep)?,
        run_dir: cfg.out_dir.clone(),
    })
}

/// CSV with one row per run and the per-target median EER repeated on
/// each row of that target.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("target,seed,expected_sparsity,realized_sparsity,params,flops,eer,min_dcf,median_eer\n");
    for r in rows {
        let same: Vec<f64> = rows.iter().filter(|o| o.target == r.target).map(|o| o.eer).collect();
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{},{:.6},{:.6},{:.6}",
            r.target,
            r.seed,
            r.expected_sparsity,
            r.realized_sparsity,
            r.params,
            r.flops,
            r.eer,
            r.min_dcf,
            median(&same).expect("row's own target is present")
        );
    }
    s
}

/// Long-format retention patterns of every sweep row.
pub fn sweep_retention_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("target,seed,layer,kind,kept,total,fraction\n");
    for r in rows {
        for p in &r.retention.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.6}",
                r.target,
                r.seed,
                p.layer,
                p.kind,
                p.kept,
                p.total,
                p.fraction()
            );
        }
    }
    s
}
