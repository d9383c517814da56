//! Gradient-inversion attacks: DLG (Euclidean gradient matching over input
//! and label logits) and IGA (cosine matching plus total variation over a
//! box-constrained input with a known label). Both use plain gradient descent.

mod analytic;
mod objective;

pub use objective::{
    attack_input_gradient, cosine_distance, dlg_loss, dummy_gradient, finite_diff_gradient, iga_loss,
    matching_loss, squared_distance, total_variation, total_variation_subgradient, HvpMode, InputGradient,
    Labels, Objective, FD_STEP,
};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mse, ssim};
use crate::nn::{loss_and_grad, LabeledExample, NetworkParams};
use crate::noise::{gauss_perturb, sample_about_pole, GaussParams};
use crate::rng::RngStream;
use crate::sphere::rotate_pole_to_in_place;
use crate::tensor::{FlatVector, ImageTensor};
use crate::training::Mechanism;

pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_DLG_ETA: f64 = 0.1;
pub const DEFAULT_IGA_ETA: f64 = 0.01;
pub const DEFAULT_ALPHA_TV: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Dlg,
    Iga,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Dlg => "dlg",
            AttackMethod::Iga => "iga",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    /// Pixels and label logits drawn from `N(0, 1)`.
    GaussianRandom,
    /// Pixels from `U(0, 1)`, label logits from `N(0, 1)`.
    #[default]
    UniformRandom,
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA_TV
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Step size; `None` picks the method default.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha_tv: f64,
    #[serde(default)]
    pub hvp_mode: HvpMode,
    #[serde(default)]
    pub init: AttackInit,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(method: AttackMethod, seed: u64) -> Self {
        AttackConfig {
            method,
            iterations: DEFAULT_ITERATIONS,
            eta: None,
            alpha_tv: DEFAULT_ALPHA_TV,
            hvp_mode: HvpMode::default(),
            init: AttackInit::default(),
            seed,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.eta.unwrap_or(match self.method {
            AttackMethod::Dlg => DEFAULT_DLG_ETA,
            AttackMethod::Iga => DEFAULT_IGA_ETA,
        })
    }

    pub fn objective(&self) -> Objective {
        match self.method {
            AttackMethod::Dlg => Objective::Dlg,
            AttackMethod::Iga => Objective::Iga { alpha_tv: self.alpha_tv },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("attack iterations must be at least 1".into()));
        }
        if !(self.alpha_tv >= 0.0 && self.alpha_tv.is_finite()) {
            return Err(Error::Config(format!("alpha_tv must be >= 0, got {}", self.alpha_tv)));
        }
        let eta = self.step_size();
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("attack eta must be positive, got {eta}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    /// Lowest-loss iterate, `x_0` included.
    pub reconstructed: ImageTensor,
    /// Label logits of the lowest-loss iterate (DLG only).
    pub label_logits: Option<Vec<f64>>,
    /// The last finite iterate.
    pub final_iterate: ImageTensor,
    /// Attack loss at `x_0, x_1, ...`; stops early on divergence.
    pub loss_trajectory: Vec<f64>,
    pub best_iteration: usize,
    pub best_loss: f64,
    pub final_ssim: f64,
    pub final_mse: f64,
    /// The loss or the iterate became non-finite before the budget ran out.
    pub diverged: bool,
}

/// Applies a mechanism to a gradient before the attacker sees it.
///
/// Gaussian adds `N(0, sigma^2)` per coordinate. VMF replaces the direction
/// with a draw centred on it and keeps the norm. `None` returns the gradient.
pub fn perturb_target(grad: &FlatVector, mechanism: &Mechanism, rng: RngStream) -> Result<FlatVector> {
    match *mechanism {
        Mechanism::None => Ok(grad.clone()),
        Mechanism::Gaussian { sigma } => Ok(gauss_perturb(&GaussParams::new(sigma)?, grad, rng)),
        Mechanism::Vmf { .. } => {
            let kappa = mechanism.vmf_concentration().expect("vmf");
            let norm = grad.l2_norm();
            if norm == 0.0 {
                return Err(Error::ZeroVector);
            }
            let mu: Vec<f64> = grad.as_slice().iter().map(|v| v / norm).collect();
            let mut sample = sample_about_pole(kappa, grad.len(), &mut rng.rng());
            rotate_pole_to_in_place(&mu, &mut sample);
            Ok(FlatVector::from_raw(sample.into_iter().map(|v| v * norm).collect()))
        }
    }
}

fn initial_image(shape: (usize, usize, usize), init: AttackInit, rng: RngStream) -> ImageTensor {
    let (h, w, c) = shape;
    let mut r = rng.rng();
    let data = (0..h * w * c)
        .map(|_| match init {
            AttackInit::GaussianRandom => r.sample(StandardNormal),
            AttackInit::UniformRandom => r.random::<f64>(),
        })
        .collect();
    ImageTensor::new(h, w, c, data).expect("finite draws")
}

fn initial_logits(classes: usize, rng: RngStream) -> Vec<f64> {
    let mut r = rng.rng();
    (0..classes).map(|_| r.sample(StandardNormal)).collect()
}

/// DLG: descends on pixels and label logits of a dummy example so its gradient
/// matches `target` in squared Euclidean distance.
pub fn dlg_attack(
    params: &NetworkParams,
    target: &FlatVector,
    cfg: &AttackConfig,
    ground_truth: &ImageTensor,
) -> Result<AttackReport> {
    cfg.validate()?;
    let streams = RngStream::new(cfg.seed);
    let x0 = initial_image(params.arch().input_shape(), cfg.init, streams.child(0));
    let l0 = initial_logits(params.arch().classes(), streams.child(1));
    descend(params, target, cfg, ground_truth, x0, Some(l0), None, false)
}

/// IGA: projected descent on the pixels of a dummy example with known label
/// `y`, matching `target` in cosine distance plus `alpha TV(x)`.
pub fn iga_attack(
    params: &NetworkParams,
    target: &FlatVector,
    y: usize,
    cfg: &AttackConfig,
    ground_truth: &ImageTensor,
) -> Result<AttackReport> {
    cfg.validate()?;
    let streams = RngStream::new(cfg.seed);
    let mut x0 = initial_image(params.arch().input_shape(), cfg.init, streams.child(0));
    x0.clamp_unit();
    descend(params, target, cfg, ground_truth, x0, None, Some(y), true)
}

/// Runs the configured attack on the (optionally privatised) gradient of one example.
pub fn attack_example(
    params: &NetworkParams,
    example: &LabeledExample,
    defense: &Mechanism,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    let (_, grad) = loss_and_grad(params, example)?;
    let target = perturb_target(&grad, defense, RngStream::new(cfg.seed).child(2))?;
    match cfg.method {
        AttackMethod::Dlg => dlg_attack(params, &target, cfg, &example.x),
        AttackMethod::Iga => iga_attack(params, &target, example.y, cfg, &example.x),
    }
}

#[allow(clippy::too_many_arguments)]
fn descend(
    params: &NetworkParams,
    target: &FlatVector,
    cfg: &AttackConfig,
    ground_truth: &ImageTensor,
    mut x: ImageTensor,
    mut logits: Option<Vec<f64>>,
    known: Option<usize>,
    project: bool,
) -> Result<AttackReport> {
    if !x.same_shape(ground_truth) {
        return Err(Error::ShapeMismatch(format!(
            "ground truth is {:?}, network input is {:?}",
            ground_truth.shape(),
            x.shape()
        )));
    }
    let objective = cfg.objective();
    let eta = cfg.step_size();
    let evaluate = |x: &ImageTensor, logits: &Option<Vec<f64>>| {
        let labels = match (logits, known) {
            (Some(l), _) => Labels::Logits(l),
            (None, Some(y)) => Labels::Known(y),
            (None, None) => unreachable!("labels are either optimised or known"),
        };
        attack_input_gradient(params, target, x, labels, objective, cfg.hvp_mode)
    };

    let (mut loss, mut grad) = evaluate(&x, &logits)?;
    let mut trajectory = vec![loss];
    let mut best = (loss, 0, x.clone(), logits.clone());
    let mut diverged = !loss.is_finite();
    if diverged {
        return Err(Error::NonFinite("attack loss at the initial iterate"));
    }
    for t in 1..=cfg.iterations {
        let stepped: Vec<f64> = x.data().iter().zip(&grad.pixels).map(|(v, g)| v - eta * g).collect();
        let next_logits = logits.as_ref().map(|l| {
            let gl = grad.labels.as_ref().expect("label gradient for optimised logits");
            l.iter().zip(gl).map(|(v, g)| v - eta * g).collect::<Vec<f64>>()
        });
        if stepped.iter().any(|v| !v.is_finite()) || next_logits.iter().flatten().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        let mut next = x.with_data(stepped)?;
        if project {
            next.clamp_unit();
        }
        let (next_loss, next_grad) = evaluate(&next, &next_logits)?;
        if !next_loss.is_finite() || next_grad.pixels.iter().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        x = next;
        logits = next_logits;
        loss = next_loss;
        grad = next_grad;
        trajectory.push(loss);
        if loss < best.0 {
            best = (loss, t, x.clone(), logits.clone());
        }
    }
    let (best_loss, best_iteration, reconstructed, label_logits) = best;
    Ok(AttackReport {
        final_ssim: ssim(&reconstructed, ground_truth)?,
        final_mse: mse(&reconstructed, ground_truth)?,
        reconstructed,
        label_logits,
        final_iterate: x,
        loss_trajectory: trajectory,
        best_iteration,
        best_loss,
        diverged,
    })
}
