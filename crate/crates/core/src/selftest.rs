//! Property suites shared by the `selftest` command and the test targets:
//! finite-difference checks of every differentiable op, Monte Carlo checks
//! of the Hard Concrete moments, and compaction equivalence on random plans.

use crate::compactor;
use crate::error::Result;
use crate::fabric::GateMode;
use crate::gradcheck;
use crate::hard_concrete::{self, GateShape, HardConcreteParams};
use crate::model::{HeadKind, ModelConfig, PrunableModel, Preset};
use crate::objectives::{self, AamParams};
use crate::rng::{self, Domain};
use crate::tensor::{Graph, Tensor, TensorError, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

/// Relative error bound for single ops.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Relative error bound for the whole model.
pub const MODEL_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradResult {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

struct Inputs {
    rng: rand_chacha::ChaCha8Rng,
}

impl Inputs {
    fn new(seed: u64) -> Self {
        Inputs {
            rng: rng::stream_rng(seed, Domain::Probe, 1),
        }
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                v
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    /// Uniform on `[lo, hi)`.
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    fn sym(&mut self, shape: &[usize]) -> Tensor {
        self.uniform(shape, -2.0, 2.0)
    }

    /// Normal values pushed at least `gap` away from every point in `kinks`.
    fn away_from(&mut self, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
        let mut t = self.normal(shape);
        for v in t.data_mut() {
            for &k in kinks {
                if (*v - k).abs() < gap {
                    *v = if *v >= k { k + gap } else { k - gap };
                }
            }
        }
        t
    }
}

/// Contracts `y` against fixed random weights so every output element
/// contributes to the scalar being differentiated.
fn project(g: &mut Graph, y: Var, seed: u64) -> std::result::Result<Var, TensorError> {
    let shape = g.shape(y).to_vec();
    let w = Inputs::new(seed ^ 0x5eed).normal(&shape);
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> std::result::Result<Var, TensorError>>;

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let mut r = Inputs::new(seed);
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($t:expr),*], $f:expr) => {
            cases.push(($name, vec![$($t),*], Box::new($f)));
        };
    }
    case!("add", [r.sym(&[3, 4]), r.sym(&[3, 4])], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 1)
    });
    case!("add_broadcast", [r.sym(&[2, 3, 4]), r.sym(&[4])], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 2)
    });
    case!("sub_broadcast", [r.sym(&[3, 1]), r.sym(&[1, 4])], |g, v| {
        let y = g.sub(v[0], v[1])?;
        project(g, y, 3)
    });
    case!("mul_broadcast", [r.sym(&[2, 3, 4]), r.sym(&[3, 1])], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 4)
    });
    case!("div", [r.sym(&[3, 4]), r.uniform(&[3, 4], 0.5, 2.0)], |g, v| {
        let y = g.div(v[0], v[1])?;
        project(g, y, 5)
    });
    case!("add_scalar", [r.sym(&[5])], |g, v| {
        let y = g.add_scalar(v[0], 0.7)?;
        project(g, y, 6)
    });
    case!("mul_scalar", [r.sym(&[5])], |g, v| {
        let y = g.mul_scalar(v[0], -1.3)?;
        project(g, y, 7)
    });
    case!("neg", [r.sym(&[5])], |g, v| {
        let y = g.neg(v[0])?;
        project(g, y, 8)
    });
    case!("sigmoid", [r.sym(&[6])], |g, v| {
        let y = g.sigmoid(v[0])?;
        project(g, y, 9)
    });
    case!("tanh", [r.sym(&[6])], |g, v| {
        let y = g.tanh(v[0])?;
        project(g, y, 10)
    });
    case!("gelu", [r.sym(&[6])], |g, v| {
        let y = g.gelu(v[0])?;
        project(g, y, 11)
    });
    case!("relu", [r.away_from(&[6], &[0.0], 0.05)], |g, v| {
        let y = g.relu(v[0])?;
        project(g, y, 12)
    });
    case!("exp", [r.sym(&[6])], |g, v| {
        let y = g.exp(v[0])?;
        project(g, y, 13)
    });
    case!("log", [r.uniform(&[6], 0.3, 3.0)], |g, v| {
        let y = g.log(v[0])?;
        project(g, y, 14)
    });
    case!("sqrt", [r.uniform(&[6], 0.3, 3.0)], |g, v| {
        let y = g.sqrt(v[0])?;
        project(g, y, 15)
    });
    case!("softplus", [r.sym(&[6])], |g, v| {
        let y = g.softplus(v[0])?;
        project(g, y, 16)
    });
    case!("clamp", [r.away_from(&[8], &[-0.5, 0.5], 0.05)], |g, v| {
        let y = g.clamp(v[0], -0.5, 0.5)?;
        project(g, y, 17)
    });
    case!("softmax", [r.sym(&[3, 5])], |g, v| {
        let y = g.softmax(v[0])?;
        project(g, y, 18)
    });
    case!("log_softmax", [r.sym(&[3, 5])], |g, v| {
        let y = g.log_softmax(v[0])?;
        project(g, y, 19)
    });
    case!("layer_norm", [r.sym(&[3, 6]), r.sym(&[6]), r.sym(&[6])], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 20)
    });
    case!("sum", [r.sym(&[2, 3])], |g, v| {
        let y = g.sum(v[0])?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    case!("mean", [r.sym(&[2, 3])], |g, v| {
        let y = g.mean(v[0])?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    case!("sum_axis", [r.sym(&[2, 3, 4])], |g, v| {
        let y = g.sum_axis(v[0], 1)?;
        project(g, y, 21)
    });
    case!("matmul", [r.sym(&[3, 4]), r.sym(&[4, 2])], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 22)
    });
    case!("bmm", [r.sym(&[2, 3, 4]), r.sym(&[2, 4, 5])], |g, v| {
        let y = g.bmm(v[0], v[1])?;
        project(g, y, 23)
    });
    case!("conv1d", [r.sym(&[2, 7, 3]), r.sym(&[4, 3, 3])], |g, v| {
        let y = g.conv1d(v[0], v[1], 1)?;
        project(g, y, 24)
    });
    case!("conv1d_strided", [r.sym(&[2, 9, 3]), r.sym(&[4, 3, 3])], |g, v| {
        let y = g.conv1d(v[0], v[1], 2)?;
        project(g, y, 25)
    });
    case!("reshape", [r.sym(&[2, 6])], |g, v| {
        let y = g.reshape(v[0], &[3, 4])?;
        project(g, y, 26)
    });
    case!("permute", [r.sym(&[2, 3, 4])], |g, v| {
        let y = g.permute(v[0], &[2, 0, 1])?;
        project(g, y, 27)
    });
    case!("transpose", [r.sym(&[3, 4])], |g, v| {
        let y = g.transpose(v[0], 0, 1)?;
        project(g, y, 28)
    });
    case!("concat", [r.sym(&[2, 3]), r.sym(&[2, 2])], |g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        project(g, y, 29)
    });
    case!("slice", [r.sym(&[2, 5, 3])], |g, v| {
        let y = g.slice(v[0], 1, 1, 3)?;
        project(g, y, 30)
    });
    case!("index_select", [r.sym(&[4, 3])], |g, v| {
        let y = g.index_select(v[0], &[2, 0, 2, 3])?;
        project(g, y, 31)
    });
    cases
}

/// Finite-difference checks of every differentiable op.
pub fn op_gradients(seed: u64) -> Result<Vec<GradResult>> {
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| {
            let c = gradcheck::check(&inputs, STEP, |g, v| f(g, v))?;
            Ok(GradResult {
                name: name.to_string(),
                rel_err: c.max_rel_err(),
                tolerance: OP_TOLERANCE,
            })
        })
        .collect()
}

/// Finite-difference checks of the composite pieces: gate sampling, the
/// expected-sparsity term, both task losses and the tiny model end to end.
pub fn composite_gradients(seed: u64) -> Result<Vec<GradResult>> {
    let mut r = Inputs::new(seed.wrapping_add(7));
    let mut out = Vec::new();
    let mut push = |name: &str, c: gradcheck::GradCheck, tolerance: f64| {
        out.push(GradResult {
            name: name.to_string(),
            rel_err: c.max_rel_err(),
            tolerance,
        })
    };

    let shape = GateShape::default();
    let la = r.uniform(&[8], -2.0, 2.0);
    // Draws for which no sample lands within reach of a clamp boundary.
    let u: Vec<f64> = (0..8)
        .map(|i| {
            let target = 0.2 + 0.08 * i as f64;
            let s = (target - shape.gamma) / shape.span();
            let x = shape.beta * (s / (1.0 - s)).ln() - la.data()[i];
            1.0 / (1.0 + (-x).exp())
        })
        .collect();
    let c = gradcheck::check(std::slice::from_ref(&la), STEP, |g, v| {
        let z = hard_concrete::sample_var(g, shape, v[0], &u)?;
        project(g, z, 40)
    })?;
    push("hard_concrete_sample", c, OP_TOLERANCE);

    let model = tiny_model(HeadKind::Binary, seed)?;
    let fabric = model.fabric.clone().expect("gated");
    let la = r.uniform(&[fabric.len()], -2.0, 2.0);
    let c = gradcheck::check(&[la], STEP, |g, v| fabric.expected_sparsity_var(g, v[0]))?;
    push("expected_sparsity", c, OP_TOLERANCE);

    let labels = [1usize, 0, 2, 1];
    let c = gradcheck::check(&[r.normal(&[4, 3]), r.normal(&[5, 3])], STEP, |g, v| {
        objectives::aam_loss(g, v[0], v[1], &labels, AamParams::new(0.2, 4.0)?)
    })?;
    push("aam_loss", c, OP_TOLERANCE);

    let flags = [true, false, false, true, true];
    let c = gradcheck::check(&[r.normal(&[5])], STEP, |g, v| objectives::bce_loss(g, v[0], &flags))?;
    push("bce_loss", c, OP_TOLERANCE);

    push("model_binary", model_check(&model, &mut r, GateSetting::Train)?, MODEL_TOLERANCE);
    push("model_binary_eval", model_check(&model, &mut r, GateSetting::Eval)?, MODEL_TOLERANCE);
    let aam = tiny_model(HeadKind::Aam { num_classes: 3 }, seed)?;
    push("model_aam", model_check(&aam, &mut r, GateSetting::Train)?, MODEL_TOLERANCE);
    Ok(out)
}

#[derive(Clone, Copy)]
enum GateSetting {
    Train,
    Eval,
}

const TINY_FEAT: usize = 3;
const TINY_FRAMES: usize = 6;

fn tiny_model(head: HeadKind, seed: u64) -> Result<PrunableModel> {
    PrunableModel::new(ModelConfig::preset(Preset::Tiny, TINY_FEAT, TINY_FRAMES, head), seed, true)
}

/// Checks the gradient of the task loss with respect to the input, every
/// parameter tensor and the gate logits.
fn model_check(model: &PrunableModel, r: &mut Inputs, gates: GateSetting) -> Result<gradcheck::GradCheck> {
    let batch = 3;
    let x = r.normal(&[batch, TINY_FRAMES, TINY_FEAT]);
    let fabric = model.fabric.as_ref().expect("gated");
    // Moderate logits keep the deterministic gates strictly inside (0, 1).
    let la = r.uniform(&[fabric.len()], -0.5, 1.5);
    let u: Vec<f64> = (0..fabric.len()).map(|i| 0.3 + 0.4 * ((i * 7 % 11) as f64 / 10.0)).collect();
    let mut inputs = vec![x];
    inputs.extend(model.params.iter().map(|(_, t)| t.clone()));
    inputs.push(la);
    let n = inputs.len();
    gradcheck::check(&inputs, STEP, |g, v| {
        let bound = crate::model::Bound {
            params: v[1..n - 1].to_vec(),
            log_alpha: Some(v[n - 1]),
        };
        let mode = match gates {
            GateSetting::Train => GateMode::Train { uniforms: &u },
            GateSetting::Eval => GateMode::Eval,
        };
        let out = model.forward_var(g, &bound, v[0], mode)?;
        match model.config.head {
            HeadKind::Binary => {
                let logits = model.binary_logits(g, &bound, out.embedding)?;
                objectives::bce_loss(g, logits, &[true, false, true])
            }
            HeadKind::Aam { .. } => {
                let w = model.aam_weight(&bound)?;
                objectives::aam_loss(g, out.embedding, w, &[0, 2, 1], AamParams::new(0.2, 4.0)?)
            }
        }
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloRow {
    pub log_alpha: f64,
    pub prob_nonzero: f64,
    pub prob_nonzero_mc: f64,
    pub prob_nonzero_se: f64,
    pub mean: f64,
    pub mean_mc: f64,
    pub mean_se: f64,
}

impl MonteCarloRow {
    /// Both moments within three standard errors.
    pub fn passed(&self) -> bool {
        (self.prob_nonzero - self.prob_nonzero_mc).abs() <= 3.0 * self.prob_nonzero_se
            && (self.mean - self.mean_mc).abs() <= 3.0 * self.mean_se
    }
}

/// Compares the closed-form gate moments with `samples` reparameterized
/// draws at each `log_alpha`.
pub fn hard_concrete_monte_carlo(log_alphas: &[f64], samples: usize, seed: u64) -> Result<Vec<MonteCarloRow>> {
    log_alphas
        .iter()
        .enumerate()
        .map(|(k, &la)| {
            let p = HardConcreteParams::new(la);
            let (mut nz, mut s1, mut s2) = (0usize, 0.0, 0.0);
            for i in 0..samples {
                let u = rng::counter_uniform(seed, Domain::Probe, k as u64, i as u64);
                let z = hard_concrete::sample(p, u)?.z;
                if z > 0.0 {
                    nz += 1;
                }
                s1 += z;
                s2 += z * z;
            }
            let n = samples as f64;
            let pm = nz as f64 / n;
            let mean = s1 / n;
            let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
            let pa = hard_concrete::prob_nonzero(p);
            Ok(MonteCarloRow {
                log_alpha: la,
                prob_nonzero: pa,
                prob_nonzero_mc: pm,
                prob_nonzero_se: (pa * (1.0 - pa) / n).sqrt(),
                mean: hard_concrete::expected_value(p),
                mean_mc: mean,
                mean_se: (var / n).sqrt(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CompactionRow {
    pub kept: usize,
    pub gates: usize,
    pub max_abs_diff: f64,
    pub realized_params: usize,
    pub compacted_params: usize,
    pub analytic_params: usize,
    pub flops: u64,
    pub original_flops: u64,
}

impl CompactionRow {
    pub fn passed(&self) -> bool {
        self.max_abs_diff < compactor::EQUIVALENCE_TOLERANCE
            && self.realized_params == self.compacted_params
            && self.compacted_params == self.analytic_params
            && (self.kept == self.gates || self.flops < self.original_flops)
    }
}

/// Random binary plans on `model`: each plan draws a keep probability and
/// then keeps every gate independently with it, so nearly empty and nearly
/// full plans both occur.
pub fn compaction_equivalence(model: &PrunableModel, plans: usize, probes: usize, seed: u64) -> Result<Vec<CompactionRow>> {
    let fabric = model
        .fabric
        .as_ref()
        .ok_or_else(|| crate::Error::Compaction("model has no gates".into()))?;
    let len = model.config.max_frames;
    let x = compactor::probe_inputs(model, probes, len, seed);
    let original_flops = model.count_flops(len)?;
    let mut rng = rng::stream_rng(seed, Domain::Probe, 2);
    (0..plans)
        .map(|_| {
            let p: f64 = rng.random_range(0.0..1.0);
            let keep: Vec<bool> = (0..fabric.len()).map(|_| rng.random_bool(p)).collect();
            let plan = compactor::plan_from_keep(model, &keep, len)?;
            let compacted = compactor::compact(model, &plan)?;
            let eq = compactor::verify_equivalence(model, &keep, &compacted, &x)?;
            Ok(CompactionRow {
                kept: keep.iter().filter(|&&k| k).count(),
                gates: keep.len(),
                max_abs_diff: eq.max_abs_diff,
                realized_params: plan.realized_params,
                compacted_params: compacted.count_params(),
                analytic_params: fabric.realized_remaining(&keep),
                flops: compacted.count_flops(len)?,
                original_flops,
            })
        })
        .collect()
}

/// Outcome of the full suite.
#[derive(Debug, Clone, Serialize)]
pub struct SelfTestReport {
    pub gradients: Vec<GradResult>,
    pub monte_carlo: Vec<MonteCarloRow>,
    pub compaction: Vec<CompactionRow>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.gradients.iter().all(GradResult::passed)
            && self.monte_carlo.iter().all(MonteCarloRow::passed)
            && self.compaction.iter().all(CompactionRow::passed)
    }
}

pub const MC_LOG_ALPHAS: [f64; 5] = [-3.0, -1.0, 0.0, 1.0, 3.0];
pub const MC_SAMPLES: usize = 100_000;

/// Runs everything at the default sizes: all op and composite gradient
/// checks, 10^5-sample Monte Carlo and 50 compaction plans on the small
/// preset.
pub fn run(seed: u64) -> Result<SelfTestReport> {
    let mut gradients = op_gradients(seed)?;
    gradients.extend(composite_gradients(seed)?);
    let monte_carlo = hard_concrete_monte_carlo(&MC_LOG_ALPHAS, MC_SAMPLES, seed)?;
    let small = PrunableModel::new(
        ModelConfig::preset(Preset::Small, 24, 50, HeadKind::Aam { num_classes: 48 }),
        seed,
        true,
    )?;
    let compaction = compaction_equivalence(&small, 50, 4, seed)?;
    Ok(SelfTestReport {
        gradients,
        monte_carlo,
        compaction,
    })
}

