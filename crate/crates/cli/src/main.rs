use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hybrid_prune::pipeline::{self, Split};
use hybrid_prune::selftest;
use hybrid_prune::trainer::{self, RunDir, TrainConfig, Trainer};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Joint fine-tuning and structured pruning with Hard Concrete gates.
#[derive(Parser)]
#[command(name = "hprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a gated model on a synthetic task.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Binarize the gates of a trained checkpoint, compact and verify.
    Finalize {
        checkpoint: PathBuf,
        /// Target sparsity; defaults to the run's configured target.
        #[arg(long)]
        target: Option<f64>,
        /// Run directory receiving the outputs; defaults to the one holding the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its task data.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Summarize a run directory into summary.csv.
    Report { run_dir: PathBuf },
    /// Train, finalize and evaluate over a grid of targets and seeds.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated target sparsities.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5")]
        targets: Vec<f64>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Gradient, Monte Carlo and compaction-equivalence checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Default output root when neither `--out` nor `out_dir` is given.
const OUT_ROOT_ENV: &str = "HPRUNE_OUT_ROOT";

impl RunArgs {
    fn resolve(&self, name: impl FnOnce(&TrainConfig) -> String) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut out_given = false;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
            out_given |= mentions_out_dir(&text);
        }
        for kv in &self.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.set(k, v)?;
            out_given |= k.trim() == "out_dir";
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        } else if !out_given {
            let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            cfg.out_dir = root.join(name(&cfg));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn mentions_out_dir(text: &str) -> bool {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .any(|(k, _)| k.trim() == "out_dir")
}

fn progress(t: &Trainer) {
    let s_hat = t.model.fabric.as_ref().map_or(0.0, |f| f.expected_sparsity());
    let c = &t.controller;
    eprintln!(
        "epoch {:.2}  step {}/{}  expected sparsity {:.4}  target {:.4}  lambda1 {:.4}  lambda2 {:.4}",
        t.epoch_progress(),
        t.step(),
        t.total_steps(),
        s_hat,
        c.scheduled_target(t.epoch_progress()),
        c.lambda1,
        c.lambda2
    );
}

/// The run directory containing `checkpoint`, which lives in its `checkpoints/`.
fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(n) if n == "checkpoints" => parent.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run, resume } => {
            let t = match resume {
                Some(ckpt) => {
                    let dir = run.out.clone().unwrap_or_else(|| run_dir_of(&ckpt));
                    trainer::resume(&ckpt, &dir, progress)?
                }
                None => {
                    let cfg = run.resolve(|c| format!("{}_t{}_s{}", c.task, c.target, c.seed))?;
                    eprintln!("training into {}", cfg.out_dir.display());
                    trainer::fit_with(&cfg, progress)?
                }
            };
            let e = t.evaluate()?;
            println!("{}", serde_json::to_string_pretty(&e)?);
            println!("final checkpoint: {}", RunDir { root: t.config.out_dir.clone() }.final_checkpoint().display());
        }
        Command::Finalize { checkpoint, target, out } => {
            let dir = out.unwrap_or_else(|| run_dir_of(&checkpoint));
            let report = pipeline::finalize(&checkpoint, target, &dir)?;
            println!(
                "realized sparsity {:.4} (target {:.4}, expected {:.4})  params {} -> {}  flops {} -> {}  max diff {:e}",
                report.realized_sparsity,
                report.target,
                report.expected_sparsity,
                report.original_params,
                report.compacted_params,
                report.original_flops,
                report.compacted_flops,
                report.equivalence.max_abs_diff
            );
            println!("compacted checkpoint: {}", RunDir { root: dir }.compacted_checkpoint().display());
        }
        Command::Eval { checkpoint, split } => {
            let split: Split = split.parse()?;
            let report = pipeline::eval_checkpoint(&checkpoint, split)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Report { run_dir } => {
            print!("{}", pipeline::report(&run_dir)?);
        }
        Command::Sweep { run, targets, seeds } => {
            if targets.is_empty() || seeds.is_empty() {
                bail!("sweep needs at least one target and one seed");
            }
            let base = run.resolve(|c| format!("sweep_{}", c.task))?;
            let root = base.out_dir.clone();
            std::fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
            let rows = pipeline::sweep_with(&base, &targets, &seeds, &root, |row| {
                eprintln!(
                    "t {} seed {}: realized sparsity {:.4}  params {}  eer {:.4}  min_dcf {:.4}",
                    row.target, row.seed, row.realized_sparsity, row.params, row.eer, row.min_dcf
                )
            })?;
            let csv = pipeline::sweep_csv(&rows);
            let path = root.join("sweep.csv");
            std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            let retention = pipeline::sweep_retention_csv(&rows);
            let rpath = root.join("retention.csv");
            std::fs::write(&rpath, retention).with_context(|| format!("writing {}", rpath.display()))?;
            print!("{csv}");
            eprintln!("wrote {} and {}", path.display(), rpath.display());
        }
        Command::Selftest { seed } => {
            let r = selftest::run(seed)?;
            for g in &r.gradients {
                println!(
                    "{} grad {:<22} rel err {:.2e} (< {:.0e})",
                    verdict(g.passed()),
                    g.name,
                    g.rel_err,
                    g.tolerance
                );
            }
            for m in &r.monte_carlo {
                println!(
                    "{} hard concrete log_alpha {:>4}: P(z>0) {:.5} vs {:.5} (se {:.1e}), E[z] {:.5} vs {:.5} (se {:.1e})",
                    verdict(m.passed()),
                    m.log_alpha,
                    m.prob_nonzero,
                    m.prob_nonzero_mc,
                    m.prob_nonzero_se,
                    m.mean,
                    m.mean_mc,
                    m.mean_se
                );
            }
            let worst = r.compaction.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max);
            let ok = r.compaction.iter().filter(|c| c.passed()).count();
            println!(
                "{} compaction {}/{} random plans, max abs diff {:e}",
                verdict(ok == r.compaction.len()),
                ok,
                r.compaction.len(),
                worst
            );
            if !r.passed() {
                bail!("selftest failed");
            }
        }
    }
    Ok(())
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
