//! Seeded synthetic stand-ins for speaker verification (open-set identity)
//! and anti-spoofing (artifact detection). Every utterance is a pure
//! function of the task seed and its index.

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ToySv,
    ToySpoof,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_sv" => Ok(TaskKind::ToySv),
            "toy_spoof" => Ok(TaskKind::ToySpoof),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::ToySv => "toy_sv",
            TaskKind::ToySpoof => "toy_spoof",
        })
    }
}

/// Utterances of shape `[frames, feat_dim]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub feat_dim: usize,
    data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    fn with_capacity(frames: usize, feat_dim: usize, n: usize) -> Self {
        Dataset {
            frames,
            feat_dim,
            data: Vec::with_capacity(n * frames * feat_dim),
            labels: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, utt: &[f64], label: usize) {
        debug_assert_eq!(utt.len(), self.frames * self.feat_dim);
        self.data.extend_from_slice(utt);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn utterance(&self, i: usize) -> &[f64] {
        let n = self.frames * self.feat_dim;
        &self.data[i * n..(i + 1) * n]
    }

    /// Stacks the given utterances into `[B, frames, feat_dim]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.frames * self.feat_dim);
        for &i in indices {
            data.extend_from_slice(self.utterance(i));
        }
        Tensor::new([indices.len(), self.frames, self.feat_dim], data).expect("batch shape")
    }

    /// All utterances as one tensor.
    pub fn inputs(&self) -> Tensor {
        Tensor::new([self.len(), self.frames, self.feat_dim], self.data.clone()).expect("dataset shape")
    }

    /// Writes the documented flat binary layout: the 8-byte magic
    /// `HPSYNTH1`, then `n`, `frames`, `feat_dim` as little-endian u32,
    /// `n` u32 labels, and `n * frames * feat_dim` little-endian f32 values.
    pub fn export(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + 4 * (self.len() + self.data.len()));
        buf.extend_from_slice(b"HPSYNTH1");
        for v in [self.len(), self.frames, self.feat_dim] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

/// One verification trial between two eval utterances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub a: usize,
    pub b: usize,
    pub target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvTaskSpec {
    /// Total identities; the last `eval_classes` are held out.
    pub num_classes: usize,
    pub eval_classes: usize,
    pub frames: usize,
    pub feat_dim: usize,
    pub prototype_scale: f64,
    /// Per-frame Gaussian noise.
    pub noise_scale: f64,
    /// Per-utterance offset shared by all frames of one utterance.
    pub session_scale: f64,
    /// Number of tanh mixing layers.
    pub mixing_depth: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub seed: u64,
}

impl Default for SvTaskSpec {
    fn default() -> Self {
        SvTaskSpec {
            num_classes: 64,
            eval_classes: 16,
            frames: 50,
            feat_dim: 24,
            prototype_scale: 1.0,
            noise_scale: 1.0,
            session_scale: 0.6,
            mixing_depth: 2,
            train_per_class: 80,
            eval_per_class: 10,
            seed: 0,
        }
    }
}

impl SvTaskSpec {
    /// Low-resource variant with about 2k training utterances.
    pub fn small_data() -> Self {
        SvTaskSpec {
            train_per_class: 42,
            ..Self::default()
        }
    }

    pub fn train_classes(&self) -> usize {
        self.num_classes - self.eval_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("sv task: {m}")));
        if self.eval_classes < 2 || self.eval_classes >= self.num_classes {
            return bad("need at least 2 eval classes and at least 1 train class");
        }
        if self.frames == 0 || self.feat_dim == 0 || self.mixing_depth == 0 {
            return bad("frames, feat_dim and mixing_depth must be positive");
        }
        if self.train_per_class == 0 || self.eval_per_class < 2 {
            return bad("need train utterances and at least 2 eval utterances per class");
        }
        if [self.prototype_scale, self.noise_scale, self.session_scale]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return bad("scales must be finite and nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvData {
    /// Labels are train class ids in `0..train_classes`.
    pub train: Dataset,
    /// Labels are the original class ids of the held-out identities.
    pub eval: Dataset,
    pub trials: Vec<Trial>,
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

// distinct stream ids inside one domain
const STREAM_MIXER: u64 = 0;
const STREAM_PROTO: u64 = 1 << 40;
const STREAM_UTT: u64 = 2 << 40;
const STREAM_TRIALS: u64 = 3 << 40;

struct Mixer {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    dim: usize,
}

impl Mixer {
    fn new(seed: u64, dim: usize, depth: usize) -> Self {
        let mut r = rng::stream_rng(seed, Domain::SvData, STREAM_MIXER);
        let std = 1.5 / (dim as f64).sqrt();
        let layers = (0..depth)
            .map(|_| {
                let w = (0..dim * dim).map(|_| std * normal(&mut r)).collect();
                let b = (0..dim).map(|_| 0.1 * normal(&mut r)).collect();
                (w, b)
            })
            .collect();
        Mixer { layers, dim }
    }

    fn apply(&self, x: &mut [f64], tmp: &mut Vec<f64>) {
        let d = self.dim;
        for (w, b) in &self.layers {
            tmp.clear();
            for o in 0..d {
                let row = &w[o * d..(o + 1) * d];
                let acc: f64 = row.iter().zip(x.iter()).map(|(a, v)| a * v).sum::<f64>() + b[o];
                tmp.push(acc.tanh());
            }
            x.copy_from_slice(tmp);
        }
    }
}

fn prototype(spec: &SvTaskSpec, class: usize) -> Vec<f64> {
    let mut r = rng::stream_rng(spec.seed, Domain::SvData, STREAM_PROTO + class as u64);
    (0..spec.feat_dim).map(|_| spec.prototype_scale * normal(&mut r)).collect()
}

/// Utterance `k` of `class`, computed from the seed alone.
pub fn sv_utterance(spec: &SvTaskSpec, class: usize, k: usize) -> Vec<f64> {
    let mixer = Mixer::new(spec.seed, spec.feat_dim, spec.mixing_depth);
    sv_utterance_with(spec, &mixer, &prototype(spec, class), class, k)
}

fn sv_utterance_with(spec: &SvTaskSpec, mixer: &Mixer, proto: &[f64], class: usize, k: usize) -> Vec<f64> {
    let f = spec.feat_dim;
    let id = STREAM_UTT + ((class as u64) << 20) + k as u64;
    let mut r = rng::stream_rng(spec.seed, Domain::SvData, id);
    let session: Vec<f64> = (0..f).map(|_| spec.session_scale * normal(&mut r)).collect();
    let mut out = Vec::with_capacity(spec.frames * f);
    let mut x = vec![0.0; f];
    let mut tmp = Vec::with_capacity(f);
    for _ in 0..spec.frames {
        for j in 0..f {
            x[j] = proto[j] + session[j] + spec.noise_scale * normal(&mut r);
        }
        mixer.apply(&mut x, &mut tmp);
        out.extend_from_slice(&x);
    }
    out
}

pub fn gen_sv(spec: &SvTaskSpec) -> Result<SvData> {
    spec.validate()?;
    let mixer = Mixer::new(spec.seed, spec.feat_dim, spec.mixing_depth);
    let tc = spec.train_classes();
    let mut train = Dataset::with_capacity(spec.frames, spec.feat_dim, tc * spec.train_per_class);
    // interleave classes so contiguous slices stay balanced
    let protos: Vec<Vec<f64>> = (0..spec.num_classes).map(|c| prototype(spec, c)).collect();
    for k in 0..spec.train_per_class {
        for c in 0..tc {
            train.push(&sv_utterance_with(spec, &mixer, &protos[c], c, k), c);
        }
    }
    let mut eval = Dataset::with_capacity(spec.frames, spec.feat_dim, spec.eval_classes * spec.eval_per_class);
    for c in tc..spec.num_classes {
        for k in 0..spec.eval_per_class {
            eval.push(&sv_utterance_with(spec, &mixer, &protos[c], c, k), c);
        }
    }
    let trials = make_trials(&eval.labels, spec.seed);
    Ok(SvData { train, eval, trials })
}

/// All same-class pairs as targets plus an equal number of distinct
/// cross-class pairs, capped by what is available.
pub fn make_trials(labels: &[usize], seed: u64) -> Vec<Trial> {
    let n = labels.len();
    let mut targets = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if labels[a] == labels[b] {
                targets.push(Trial { a, b, target: true });
            }
        }
    }
    let available = (0..n)
        .map(|a| (a + 1..n).filter(|&b| labels[a] != labels[b]).count())
        .sum::<usize>();
    let want = targets.len().min(available);
    let mut r = rng::stream_rng(seed, Domain::Trials, STREAM_TRIALS);
    let mut seen = std::collections::BTreeSet::new();
    let mut nontargets = Vec::with_capacity(want);
    if want * 2 > available {
        // dense case: take every cross pair in order
        for a in 0..n {
            for b in a + 1..n {
                if labels[a] != labels[b] && nontargets.len() < want {
                    nontargets.push(Trial { a, b, target: false });
                }
            }
        }
    } else {
        while nontargets.len() < want {
            let a = r.random_range(0..n);
            let b = r.random_range(0..n);
            let (a, b) = (a.min(b), a.max(b));
            if a != b && labels[a] != labels[b] && seen.insert((a, b)) {
                nontargets.push(Trial { a, b, target: false });
            }
        }
    }
    targets.extend(nontargets);
    targets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpoofTaskSpec {
    pub amplitude: f64,
    /// Frames per full cycle of the square-wave artifact (even, >= 2).
    pub period: usize,
    /// Fraction of spoofed utterances.
    pub spoof_fraction: f64,
    pub frames: usize,
    pub feat_dim: usize,
    pub smoothing_window: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
}

impl Default for SpoofTaskSpec {
    fn default() -> Self {
        SpoofTaskSpec {
            amplitude: 0.05,
            period: 2,
            spoof_fraction: 0.5,
            frames: 50,
            feat_dim: 24,
            smoothing_window: 5,
            train_count: 2048,
            eval_count: 512,
            seed: 0,
        }
    }
}

impl SpoofTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("spoof task: {m}")));
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return bad("amplitude must be finite and nonnegative");
        }
        if self.period < 2 || self.period % 2 != 0 {
            return bad("period must be even and at least 2");
        }
        if !(self.spoof_fraction > 0.0 && self.spoof_fraction < 1.0) {
            return bad("spoof_fraction must lie in (0, 1)");
        }
        if self.frames < 2 || self.feat_dim == 0 || self.smoothing_window == 0 {
            return bad("frames >= 2, feat_dim and smoothing_window positive");
        }
        if self.train_count < 2 || self.eval_count < 2 {
            return bad("need at least 2 train and eval utterances");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpoofData {
    /// Label 1 is bona fide, 0 is spoof.
    pub train: Dataset,
    pub eval: Dataset,
}

/// Whether utterance `i` is spoofed: a deterministic low-discrepancy
/// assignment that keeps every prefix balanced to within one item.
fn is_spoof(spec: &SpoofTaskSpec, i: usize) -> bool {
    let f = spec.spoof_fraction;
    ((i + 1) as f64 * f).floor() > (i as f64 * f).floor()
}

/// Utterance `i` of split `split` (0 train, 1 eval) and its label.
pub fn spoof_utterance(spec: &SpoofTaskSpec, split: u64, i: usize) -> (Vec<f64>, usize) {
    let (t, f, w) = (spec.frames, spec.feat_dim, spec.smoothing_window);
    let mut r = rng::stream_rng(spec.seed, Domain::SpoofData, (split << 40) + i as u64);
    let raw: Vec<f64> = (0..(t + w - 1) * f).map(|_| normal(&mut r)).collect();
    let mut out = vec![0.0; t * f];
    for s in 0..t {
        for j in 0..f {
            let acc: f64 = (0..w).map(|k| raw[(s + k) * f + j]).sum();
            out[s * f + j] = acc / w as f64;
        }
    }
    let spoof = is_spoof(spec, i);
    // drawn for every utterance so both classes consume the same stream
    let half = t / 2;
    let start = r.random_range(0..=t - half);
    let polarity = if r.random_bool(0.5) { 1.0 } else { -1.0 };
    if spoof {
        let hp = spec.period / 2;
        for s in start..start + half {
            let sign = if (s / hp) % 2 == 0 { 1.0 } else { -1.0 };
            for v in &mut out[s * f..(s + 1) * f] {
                *v += polarity * sign * spec.amplitude;
            }
        }
    }
    (out, usize::from(!spoof))
}

pub fn gen_spoof(spec: &SpoofTaskSpec) -> Result<SpoofData> {
    spec.validate()?;
    let build = |split: u64, n: usize| {
        let mut d = Dataset::with_capacity(spec.frames, spec.feat_dim, n);
        for i in 0..n {
            let (u, y) = spoof_utterance(spec, split, i);
            d.push(&u, y);
        }
        d
    };
    Ok(SpoofData {
        train: build(0, spec.train_count),
        eval: build(1, spec.eval_count),
    })
}

/// Mean over frames of one utterance.
pub fn frame_mean(d: &Dataset, i: usize) -> Vec<f64> {
    let mut m = vec![0.0; d.feat_dim];
    for frame in d.utterance(i).chunks(d.feat_dim) {
        m.iter_mut().zip(frame).for_each(|(a, v)| *a += v);
    }
    m.iter_mut().for_each(|v| *v /= d.frames as f64);
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sv() -> SvTaskSpec {
        SvTaskSpec {
            num_classes: 6,
            eval_classes: 3,
            frames: 5,
            feat_dim: 4,
            train_per_class: 3,
            eval_per_class: 4,
            ..SvTaskSpec::default()
        }
    }

    #[test]
    fn sv_is_deterministic_and_random_access() {
        let spec = tiny_sv();
        let a = gen_sv(&spec).unwrap();
        assert_eq!(a, gen_sv(&spec).unwrap());
        // eval utterance 1 of class 4 sits at row (4 - 3) * 4 + 1
        assert_eq!(a.eval.utterance(5), &sv_utterance(&spec, 4, 1)[..]);
    }

    #[test]
    fn eval_classes_are_held_out() {
        let d = gen_sv(&tiny_sv()).unwrap();
        assert!(d.train.labels.iter().all(|&c| c < 3));
        assert!(d.eval.labels.iter().all(|&c| c >= 3));
    }

    #[test]
    fn trials_are_balanced() {
        let d = gen_sv(&tiny_sv()).unwrap();
        let t = d.trials.iter().filter(|t| t.target).count();
        assert_eq!(t, 3 * 6);
        assert_eq!(d.trials.len(), 2 * t);
        for tr in &d.trials {
            assert_eq!(tr.target, d.eval.labels[tr.a] == d.eval.labels[tr.b]);
            assert!(tr.a < tr.b);
        }
    }

    #[test]
    fn noiseless_utterances_repeat_within_class() {
        let spec = SvTaskSpec {
            noise_scale: 0.0,
            session_scale: 0.0,
            ..tiny_sv()
        };
        let d = gen_sv(&spec).unwrap();
        assert_eq!(d.eval.utterance(0), d.eval.utterance(1));
        assert_ne!(d.eval.utterance(0), d.eval.utterance(4));
    }

    #[test]
    fn spoof_labels_balanced_and_artifact_is_additive() {
        let spec = SpoofTaskSpec {
            train_count: 10,
            eval_count: 4,
            frames: 8,
            feat_dim: 3,
            ..SpoofTaskSpec::default()
        };
        let d = gen_spoof(&spec).unwrap();
        assert_eq!(d.train.labels.iter().filter(|&&y| y == 1).count(), 5);
        let clean = SpoofTaskSpec {
            amplitude: 0.0,
            ..spec.clone()
        };
        let c = gen_spoof(&clean).unwrap();
        for i in 0..10 {
            let diff: Vec<f64> = d
                .train
                .utterance(i)
                .iter()
                .zip(c.train.utterance(i))
                .map(|(a, b)| (a - b).abs())
                .collect();
            let touched = diff.iter().filter(|&&v| v > 0.0).count();
            if d.train.labels[i] == 1 {
                assert_eq!(touched, 0);
            } else {
                assert_eq!(touched, 4 * 3);
                assert!(diff.iter().all(|&v| v == 0.0 || (v - 0.05).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn export_layout() {
        let d = gen_sv(&tiny_sv()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        d.eval.export(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], b"HPSYNTH1");
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        assert_eq!((u(8), u(12), u(16)), (12, 5, 4));
        assert_eq!(bytes.len(), 20 + 4 * 12 + 4 * 12 * 5 * 4);
        let first = f32::from_le_bytes(bytes[68..72].try_into().unwrap());
        assert_eq!(first, d.eval.utterance(0)[0] as f32);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(gen_sv(&SvTaskSpec {
            eval_classes: 64,
            ..SvTaskSpec::default()
        })
        .is_err());
        assert!(gen_spoof(&SpoofTaskSpec {
            period: 3,
            ..SpoofTaskSpec::default()
        })
        .is_err());
    }
}
