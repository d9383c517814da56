//! Private training loops.
//!
//! `Gaussian` follows the clip-then-noise loop: each per-example gradient is
//! clipped to norm at most `C`, every clipped gradient receives its own
//! `N(0, sigma^2)` noise, and the sum is divided by the expected batch size `L`.
//! `Vmf` scales each per-example gradient to norm exactly `C`, replaces its
//! direction with a VMF sample centred on it, restores length `C`, and averages
//! with the same `1/L` factor.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, top_k_accuracy};
use crate::nn::{forward, loss_and_grad, Architecture, LabeledExample, NetworkParams};
use crate::noise::{gauss_perturb, sample_about_pole, GaussParams, VmfParams};
use crate::rng::RngStream;
use crate::sphere::rotate_pole_to_in_place;
use crate::tensor::{l2_norm_slice, FlatVector};

/// Norms below this are treated as zero by [`scale_gradient_or_random`].
pub const ZERO_GRADIENT_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "lowercase")]
pub enum Mechanism {
    None,
    Gaussian {
        sigma: f64,
    },
    Vmf {
        epsilon_v: f64,
        /// Sample with concentration `epsilon_v / 2` instead of `epsilon_v`.
        #[serde(default)]
        halve_epsilon: bool,
    },
}

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::None => "none",
            Mechanism::Gaussian { .. } => "gaussian",
            Mechanism::Vmf { .. } => "vmf",
        }
    }

    /// The noise parameter as reported in tables (`sigma` or `epsilon_v`).
    pub fn parameter(&self) -> Option<f64> {
        match *self {
            Mechanism::None => None,
            Mechanism::Gaussian { sigma } => Some(sigma),
            Mechanism::Vmf { epsilon_v, .. } => Some(epsilon_v),
        }
    }

    /// Concentration actually used by the sampler.
    pub fn vmf_concentration(&self) -> Option<f64> {
        match *self {
            Mechanism::Vmf { epsilon_v, halve_epsilon } => {
                Some(if halve_epsilon { epsilon_v / 2.0 } else { epsilon_v })
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Mechanism::None => Ok(()),
            Mechanism::Gaussian { sigma } => GaussParams::new(sigma).map(|_| ()),
            Mechanism::Vmf { epsilon_v, .. } => VmfParams::new(epsilon_v, 2).map(|_| ()),
        }
        .map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Each example joins the batch independently with probability `L / n`.
    #[default]
    Poisson,
    /// `round(L)` distinct examples drawn uniformly.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VmfScope {
    /// One VMF draw over the whole flattened gradient.
    #[default]
    Concatenated,
    /// Independent draws per parameter tensor, each tensor scaled to `C / sqrt(tensors)`.
    PerLayer,
}

fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(flatten)]
    pub mechanism: Mechanism,
    /// Norm bound `C`.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Expected batch size `L`.
    pub expected_batch: f64,
    /// Constant learning rate.
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub vmf_scope: VmfScope,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.mechanism.validate()?;
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.expected_batch >= 1.0 && self.expected_batch.is_finite()) {
            return Err(Error::Config(format!("expected_batch must be >= 1, got {}", self.expected_batch)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Steps per epoch: `round(n / L)`, at least one.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        ((n as f64 / self.expected_batch).round() as usize).max(1)
    }
}

/// `g / max(1, |g| / C)`
pub fn clip_gradient(g: &FlatVector, clip_norm: f64) -> FlatVector {
    let norm = g.l2_norm();
    if norm <= clip_norm {
        return g.clone();
    }
    g.scaled(clip_norm / norm)
}

/// `g / (|g| / C)`: rescales to norm exactly `C`, up or down.
pub fn scale_gradient(g: &FlatVector, clip_norm: f64) -> Result<FlatVector> {
    let norm = g.l2_norm();
    if norm < ZERO_GRADIENT_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(g.scaled(clip_norm / norm))
}

/// [`scale_gradient`], substituting a uniformly random direction of norm `C`
/// when the gradient is (numerically) zero.
pub fn scale_gradient_or_random(g: &FlatVector, clip_norm: f64, rng: RngStream) -> FlatVector {
    let mut out = g.as_slice().to_vec();
    scale_in_place(&mut out, clip_norm, rng);
    FlatVector::from_raw(out)
}

fn scale_in_place(v: &mut [f64], target: f64, rng: RngStream) {
    let norm = l2_norm_slice(v);
    if norm < ZERO_GRADIENT_NORM {
        let mut r = rng.rng();
        loop {
            v.iter_mut().for_each(|x| *x = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r));
            if l2_norm_slice(v) > 0.0 {
                break;
            }
        }
        return scale_in_place(v, target, rng);
    }
    let f = target / norm;
    v.iter_mut().for_each(|x| *x *= f);
}

/// Sensitivity of the averaged gradient when one of `L` norm-`C` contributions changes.
pub fn batch_sensitivity(clip_norm: f64, expected_batch: f64) -> f64 {
    2.0 * clip_norm / expected_batch
}

/// Includes each index independently with probability `min(1, L / n)`.
pub fn poisson_batch(n: usize, expected_batch: f64, rng: RngStream) -> Vec<usize> {
    let p = (expected_batch / n as f64).clamp(0.0, 1.0);
    if p >= 1.0 {
        return (0..n).collect();
    }
    let mut r = rng.rng();
    (0..n).filter(|_| r.random::<f64>() < p).collect()
}

/// `round(L)` distinct indices, sorted.
pub fn fixed_batch(n: usize, expected_batch: f64, rng: RngStream) -> Vec<usize> {
    let k = (expected_batch.round() as usize).min(n);
    let mut idx = rand::seq::index::sample(&mut rng.rng(), n, k).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub batch_size: usize,
    /// Mean loss over the batch before the update.
    pub loss: Option<f64>,
    /// Norm of `(1/L) sum_i gbar_i` before noise.
    pub grad_norm_pre: Option<f64>,
    /// Norm of the noisy aggregate actually applied.
    pub grad_norm_post: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_accuracy: f64,
    /// `(k, top-k accuracy)` for `k` in {1, 5, 10} not exceeding the class count.
    pub top_k: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum TraceLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

impl TrainingTrace {
    /// One JSON object per line, step records first then epoch records, each
    /// tagged with `"kind"`.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&TraceLine::Step(s))?);
            out.push('\n');
        }
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(&TraceLine::Epoch(e))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }
}

/// Per-example contributions and the resulting update for one step.
struct StepOutcome {
    params: NetworkParams,
    record: StepRecord,
}

/// One DP-SGD step with clipping and per-example Gaussian noise.
pub fn dpsgd_step_gaussian(
    params: &NetworkParams,
    batch: &[LabeledExample],
    cfg: &TrainingConfig,
    rng: RngStream,
) -> Result<NetworkParams> {
    let Mechanism::Gaussian { .. } = cfg.mechanism else {
        return Err(Error::Config("dpsgd_step_gaussian needs the gaussian mechanism".into()));
    };
    Ok(step(params, batch, cfg, rng, 0)?.params)
}

/// One step with scaling to norm `C` and VMF directional noise.
pub fn dirdpsgd_step_vmf(
    params: &NetworkParams,
    batch: &[LabeledExample],
    cfg: &TrainingConfig,
    rng: RngStream,
) -> Result<NetworkParams> {
    let Mechanism::Vmf { .. } = cfg.mechanism else {
        return Err(Error::Config("dirdpsgd_step_vmf needs the vmf mechanism".into()));
    };
    Ok(step(params, batch, cfg, rng, 0)?.params)
}

/// One plain SGD step, `theta - eta (1/L) sum_i g_i`.
pub fn sgd_step(
    params: &NetworkParams,
    batch: &[LabeledExample],
    cfg: &TrainingConfig,
) -> Result<NetworkParams> {
    let cfg = TrainingConfig { mechanism: Mechanism::None, ..cfg.clone() };
    Ok(step(params, batch, &cfg, RngStream::new(0), 0)?.params)
}

/// The privatised contribution `gbar_i` (+ noise) of one example.
pub fn private_contribution(
    params: &NetworkParams,
    ex: &LabeledExample,
    cfg: &TrainingConfig,
    rng: RngStream,
) -> Result<(f64, FlatVector, FlatVector)> {
    let (loss, g) = loss_and_grad(params, ex)?;
    let (pre, post) = privatize(&g, params.arch(), cfg, rng)?;
    Ok((loss, pre, post))
}

/// Applies the configured mechanism to one gradient: returns `(gbar, noisy gbar)`.
pub fn privatize(
    g: &FlatVector,
    arch: Architecture,
    cfg: &TrainingConfig,
    rng: RngStream,
) -> Result<(FlatVector, FlatVector)> {
    let c = cfg.clip_norm;
    match cfg.mechanism {
        Mechanism::None => Ok((g.clone(), g.clone())),
        Mechanism::Gaussian { sigma } => {
            let clipped = clip_gradient(g, c);
            let noisy = gauss_perturb(&GaussParams::new(sigma)?, &clipped, rng);
            Ok((clipped, noisy))
        }
        Mechanism::Vmf { .. } => {
            let kappa = cfg.mechanism.vmf_concentration().expect("vmf");
            let segments = match cfg.vmf_scope {
                VmfScope::Concatenated => vec![(0, g.len())],
                VmfScope::PerLayer => arch
                    .layout()
                    .iter()
                    .flat_map(|l| [(l.weight_offset, l.weight_len), (l.bias_offset, l.bias_len)])
                    .collect(),
            };
            let target = c / (segments.len() as f64).sqrt();
            let mut scaled = g.as_slice().to_vec();
            let mut noisy = vec![0.0; g.len()];
            for (i, &(start, len)) in segments.iter().enumerate() {
                if len < 2 {
                    return Err(Error::Config(format!(
                        "per-layer VMF needs every parameter tensor to have >= 2 entries, got {len}"
                    )));
                }
                let seg_rng = rng.child(i as u64);
                let seg = &mut scaled[start..start + len];
                scale_in_place(seg, target, seg_rng.child(0));
                let mu: Vec<f64> = seg.iter().map(|v| v / target).collect();
                let mut sample = sample_about_pole(kappa, len, &mut seg_rng.child(1).rng());
                rotate_pole_to_in_place(&mu, &mut sample);
                for (o, s) in noisy[start..start + len].iter_mut().zip(&sample) {
                    *o = s * target;
                }
            }
            Ok((FlatVector::from_raw(scaled), FlatVector::from_raw(noisy)))
        }
    }
}

fn step(
    params: &NetworkParams,
    batch: &[LabeledExample],
    cfg: &TrainingConfig,
    rng: RngStream,
    step_index: usize,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let contributions = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| private_contribution(params, ex, cfg, rng.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let k = params.len();
    let mut pre = vec![0.0; k];
    let mut post = vec![0.0; k];
    let mut loss = 0.0;
    for (l, p, q) in &contributions {
        loss += l;
        for ((a, b), (x, y)) in pre.iter_mut().zip(post.iter_mut()).zip(p.as_slice().iter().zip(q.as_slice())) {
            *a += x;
            *b += y;
        }
    }
    let inv_l = 1.0 / cfg.expected_batch;
    pre.iter_mut().for_each(|v| *v *= inv_l);
    post.iter_mut().for_each(|v| *v *= inv_l);
    let update = FlatVector::from_raw(post);
    let mut next = params.clone();
    next.descend(cfg.learning_rate, &update)?;
    if !next.is_finite() {
        return Err(Error::NonFinite("parameters after update"));
    }
    Ok(StepOutcome {
        params: next,
        record: StepRecord {
            step: step_index,
            batch_size: batch.len(),
            loss: Some(loss / batch.len() as f64),
            grad_norm_pre: Some(l2_norm_slice(&pre)),
            grad_norm_post: Some(update.l2_norm()),
        },
    })
}

/// Logits for every example, in order.
pub fn predict(params: &NetworkParams, data: &[LabeledExample]) -> Result<Vec<FlatVector>> {
    data.par_iter().map(|ex| forward(params, &ex.x)).collect()
}

/// `(top-1 accuracy, [(k, top-k)])` over `data`.
pub fn evaluate(params: &NetworkParams, data: &[LabeledExample]) -> Result<(f64, Vec<(usize, f64)>)> {
    let preds = predict(params, data)?;
    let labels: Vec<usize> = data.iter().map(|e| e.y).collect();
    let classes = params.arch().classes();
    let top_k = [1, 5, 10]
        .into_iter()
        .filter(|&k| k <= classes)
        .map(|k| top_k_accuracy(&preds, &labels, k).map(|a| (k, a)))
        .collect::<Result<Vec<_>>>()?;
    Ok((accuracy(&preds, &labels)?, top_k))
}

/// Random streams used by [`train`], derived from the config seed.
pub struct TrainingStreams {
    master: RngStream,
}

impl TrainingStreams {
    pub fn new(seed: u64) -> Self {
        TrainingStreams { master: RngStream::new(seed) }
    }

    pub fn init(&self) -> RngStream {
        self.master.child(0)
    }

    pub fn batch(&self, step: usize) -> RngStream {
        self.master.child(1 + 2 * step as u64)
    }

    pub fn noise(&self, step: usize) -> RngStream {
        self.master.child(2 + 2 * step as u64)
    }
}

/// Trains from a seeded initialisation for `epochs * round(n / L)` steps,
/// evaluating on `test` after every epoch.
pub fn train(
    arch: Architecture,
    train_set: &[LabeledExample],
    test_set: &[LabeledExample],
    cfg: &TrainingConfig,
) -> Result<(NetworkParams, TrainingTrace)> {
    let streams = TrainingStreams::new(cfg.seed);
    let params = NetworkParams::init(arch, streams.init())?;
    train_from(params, train_set, test_set, cfg)
}

pub fn train_from(
    mut params: NetworkParams,
    train_set: &[LabeledExample],
    test_set: &[LabeledExample],
    cfg: &TrainingConfig,
) -> Result<(NetworkParams, TrainingTrace)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if test_set.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let streams = TrainingStreams::new(cfg.seed);
    let n = train_set.len();
    let steps_per_epoch = cfg.steps_per_epoch(n);
    let mut trace = TrainingTrace::default();
    let mut t = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..steps_per_epoch {
            let idx = match cfg.sampling {
                Sampling::Poisson => poisson_batch(n, cfg.expected_batch, streams.batch(t)),
                Sampling::Fixed => fixed_batch(n, cfg.expected_batch, streams.batch(t)),
            };
            if idx.is_empty() {
                trace.steps.push(StepRecord {
                    step: t,
                    batch_size: 0,
                    loss: None,
                    grad_norm_pre: None,
                    grad_norm_post: None,
                });
            } else {
                let batch: Vec<LabeledExample> = idx.iter().map(|&i| train_set[i].clone()).collect();
                let outcome = step(&params, &batch, cfg, streams.noise(t), t)?;
                params = outcome.params;
                trace.steps.push(outcome.record);
            }
            t += 1;
        }
        let (test_accuracy, top_k) = evaluate(&params, test_set)?;
        trace.epochs.push(EpochRecord { epoch, test_accuracy, top_k });
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests;
