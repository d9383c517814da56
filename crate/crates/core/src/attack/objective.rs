//! Gradient-matching objectives and their derivatives w.r.t. the dummy input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::analytic;
use crate::error::{Error, Result};
use crate::nn::{one_hot, soft_label_loss_and_grads, softmax, NetworkParams};
use crate::tensor::{check_len, dot_slices, l2_norm_slice, FlatVector, ImageTensor};

/// Step used by the finite-difference input gradient.
pub const FD_STEP: f64 = 1e-4;

/// How the derivative through the gradient computation is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMode {
    /// Central differences of the matching loss, one pair of evaluations per variable.
    #[default]
    FiniteDiff,
    /// Closed-form double backpropagation; two-layer MLP only.
    AnalyticMlp,
}

/// The label side of the dummy example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Labels<'a> {
    /// Optimised logits, turned into soft labels by a softmax.
    Logits(&'a [f64]),
    /// Class known to the attacker.
    Known(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "lowercase")]
pub enum Objective {
    /// `|grad' - grad|^2`
    Dlg,
    /// `1 - cos(grad', grad) + alpha TV(x')`
    Iga { alpha_tv: f64 },
}

/// Derivative of the attack loss w.r.t. the dummy variables.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    /// Channel-last, same layout as the image.
    pub pixels: Vec<f64>,
    /// Present when the labels are optimised logits.
    pub labels: Option<Vec<f64>>,
}

fn soft_labels(params: &NetworkParams, labels: Labels<'_>) -> Result<Vec<f64>> {
    let classes = params.arch().classes();
    match labels {
        Labels::Logits(l) => {
            check_len(classes, l.len())?;
            Ok(softmax(l))
        }
        Labels::Known(y) => one_hot(classes, y),
    }
}

/// Parameter gradient of the cross-entropy at the dummy example.
pub fn dummy_gradient(params: &NetworkParams, x: &ImageTensor, labels: Labels<'_>) -> Result<FlatVector> {
    let y = soft_labels(params, labels)?;
    Ok(soft_label_loss_and_grads(params, x, &y)?.params)
}

/// `|a - b|^2`, accumulated coordinate by coordinate.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `1 - <a, b> / (|a| |b|)`; saturates to 1 when `a` is zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm_slice(a);
    let nb = l2_norm_slice(b);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot_slices(a, b) / (na * nb)
}

/// Anisotropic total variation: absolute differences between horizontal and
/// vertical neighbours, summed over channels.
pub fn total_variation(x: &ImageTensor) -> f64 {
    let (h, w, c) = x.shape();
    let d = x.data();
    let mut tv = 0.0;
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let v = d[(r * w + col) * c + ch];
                if col + 1 < w {
                    tv += (d[(r * w + col + 1) * c + ch] - v).abs();
                }
                if r + 1 < h {
                    tv += (d[((r + 1) * w + col) * c + ch] - v).abs();
                }
            }
        }
    }
    tv
}

/// A subgradient of [`total_variation`], taking `sign(0) = 0`.
pub fn total_variation_subgradient(x: &ImageTensor) -> Vec<f64> {
    let (h, w, c) = x.shape();
    let d = x.data();
    let mut g = vec![0.0; d.len()];
    let mut pair = |a: usize, b: usize| {
        let s = sign(d[b] - d[a]);
        g[b] += s;
        g[a] -= s;
    };
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let i = (r * w + col) * c + ch;
                if col + 1 < w {
                    pair(i, (r * w + col + 1) * c + ch);
                }
                if r + 1 < h {
                    pair(i, ((r + 1) * w + col) * c + ch);
                }
            }
        }
    }
    g
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn matching_term(objective: Objective, dummy: &[f64], target: &[f64]) -> f64 {
    match objective {
        Objective::Dlg => squared_distance(dummy, target),
        Objective::Iga { .. } => cosine_distance(dummy, target),
    }
}

fn check_objective(objective: Objective, target: &FlatVector) -> Result<()> {
    if let Objective::Iga { alpha_tv } = objective {
        if !(alpha_tv >= 0.0 && alpha_tv.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha_tv must be >= 0, got {alpha_tv}")));
        }
        if target.l2_norm() == 0.0 {
            return Err(Error::InvalidParameter("cosine matching needs a nonzero target gradient".into()));
        }
    }
    Ok(())
}

/// The attack loss at `(x, labels)`, without any regulariser.
fn matching_loss_only(
    params: &NetworkParams,
    target: &FlatVector,
    x: &ImageTensor,
    labels: Labels<'_>,
    objective: Objective,
) -> Result<f64> {
    let dummy = dummy_gradient(params, x, labels)?;
    check_len(target.len(), dummy.len())?;
    Ok(matching_term(objective, dummy.as_slice(), target.as_slice()))
}

/// The full attack loss, including `alpha TV(x)` for the cosine objective.
pub fn matching_loss(
    params: &NetworkParams,
    target: &FlatVector,
    x: &ImageTensor,
    labels: Labels<'_>,
    objective: Objective,
) -> Result<f64> {
    check_objective(objective, target)?;
    let m = matching_loss_only(params, target, x, labels, objective)?;
    Ok(match objective {
        Objective::Dlg => m,
        Objective::Iga { alpha_tv } => m + alpha_tv * total_variation(x),
    })
}

/// Squared distance between the dummy gradient at `(x, softmax(logits))` and `target`.
pub fn dlg_loss(params: &NetworkParams, target: &FlatVector, x: &ImageTensor, logits: &FlatVector) -> Result<f64> {
    matching_loss(params, target, x, Labels::Logits(logits.as_slice()), Objective::Dlg)
}

/// Cosine distance between the dummy gradient at `(x, y)` and `target`, plus `alpha TV(x)`.
pub fn iga_loss(params: &NetworkParams, target: &FlatVector, x: &ImageTensor, y: usize, alpha_tv: f64) -> Result<f64> {
    matching_loss(params, target, x, Labels::Known(y), Objective::Iga { alpha_tv })
}

/// Loss and its derivative w.r.t. the dummy pixels (and logits when optimised).
pub fn attack_input_gradient(
    params: &NetworkParams,
    target: &FlatVector,
    x: &ImageTensor,
    labels: Labels<'_>,
    objective: Objective,
    mode: HvpMode,
) -> Result<(f64, InputGradient)> {
    check_objective(objective, target)?;
    let (loss, mut grad) = match mode {
        HvpMode::FiniteDiff => {
            let loss = matching_loss_only(params, target, x, labels, objective)?;
            (loss, finite_diff_gradient(params, target, x, labels, objective, FD_STEP)?)
        }
        HvpMode::AnalyticMlp => analytic::matching_loss_and_input_grad(params, target, x, labels, objective)?,
    };
    Ok(match objective {
        Objective::Dlg => (loss, grad),
        Objective::Iga { alpha_tv } => {
            if alpha_tv > 0.0 {
                for (g, t) in grad.pixels.iter_mut().zip(total_variation_subgradient(x)) {
                    *g += alpha_tv * t;
                }
            }
            (loss + alpha_tv * total_variation(x), grad)
        }
    })
}

/// Central differences of the matching term with step `h`, one variable at a time.
pub fn finite_diff_gradient(
    params: &NetworkParams,
    target: &FlatVector,
    x: &ImageTensor,
    labels: Labels<'_>,
    objective: Objective,
    h: f64,
) -> Result<InputGradient> {
    let pixels = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let probe = |delta: f64| {
                let mut data = x.data().to_vec();
                data[i] += delta;
                matching_loss_only(params, target, &x.with_data(data)?, labels, objective)
            };
            Ok((probe(h)? - probe(-h)?) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;
    let labels = match labels {
        Labels::Known(_) => None,
        Labels::Logits(l) => Some(
            (0..l.len())
                .into_par_iter()
                .map(|i| {
                    let probe = |delta: f64| {
                        let mut shifted = l.to_vec();
                        shifted[i] += delta;
                        matching_loss_only(params, target, x, Labels::Logits(&shifted), objective)
                    };
                    Ok((probe(h)? - probe(-h)?) / (2.0 * h))
                })
                .collect::<Result<Vec<f64>>>()?,
        ),
    };
    Ok(InputGradient { pixels, labels })
}
