//! Double backpropagation through the parameter gradient of the two-layer
//! tanh MLP `z = W2 tanh(W1 x + b1) + b2`.
//!
//! With soft labels `y` the parameter gradient is
//! `dz = p - y`, `dh = W2^T dz`, `da = dh * (1 - h^2)`,
//! `g = [da x^T, da, dz h^T, dz]`. Given the adjoint `gbar` of the matching
//! loss w.r.t. `g`, the routine below reverses those formulas and the forward
//! pass to reach the pixels and, for optimised labels, the label logits.

use super::objective::{InputGradient, Labels, Objective};
use crate::error::{Error, Result};
use crate::nn::{one_hot, softmax, NetworkParams};
use crate::tensor::{check_len, dot_slices, l2_norm_slice, FlatVector, ImageTensor};

pub(crate) fn matching_loss_and_input_grad(
    params: &NetworkParams,
    target: &FlatVector,
    x: &ImageTensor,
    labels: Labels<'_>,
    objective: Objective,
) -> Result<(f64, InputGradient)> {
    let arch = params.arch();
    if !arch.is_mlp() {
        return Err(Error::Unsupported(format!("analytic_mlp input gradients need an MLP, got {}", arch.tag())));
    }
    if x.shape() != arch.input_shape() {
        return Err(Error::ShapeMismatch(format!("input is {:?}, network expects {:?}", x.shape(), arch.input_shape())));
    }
    check_len(params.len(), target.len())?;
    let classes = arch.classes();
    let (w1, b1) = params.layer(0);
    let (w2, b2) = params.layer(1);
    let n = x.len();
    let hidden = b1.len();
    let xs = x.data();

    let h: Vec<f64> = (0..hidden).map(|j| (b1[j] + dot_slices(&w1[j * n..(j + 1) * n], xs)).tanh()).collect();
    let z: Vec<f64> = (0..classes).map(|k| b2[k] + dot_slices(&w2[k * hidden..(k + 1) * hidden], &h)).collect();
    let p = softmax(&z);
    let y = match labels {
        Labels::Logits(l) => {
            check_len(classes, l.len())?;
            softmax(l)
        }
        Labels::Known(c) => one_hot(classes, c)?,
    };
    let dz: Vec<f64> = p.iter().zip(&y).map(|(a, b)| a - b).collect();
    let dh: Vec<f64> = (0..hidden).map(|j| (0..classes).map(|k| w2[k * hidden + j] * dz[k]).sum()).collect();
    let dact: Vec<f64> = dh.iter().zip(&h).map(|(d, t)| d * (1.0 - t * t)).collect();

    let mut g = Vec::with_capacity(params.len());
    for &d in &dact {
        g.extend(xs.iter().map(|xi| d * xi));
    }
    g.extend_from_slice(&dact);
    for &d in &dz {
        g.extend(h.iter().map(|hj| d * hj));
    }
    g.extend_from_slice(&dz);

    let t = target.as_slice();
    let (loss, gbar) = match objective {
        Objective::Dlg => {
            let diff: Vec<f64> = g.iter().zip(t).map(|(a, b)| a - b).collect();
            (dot_slices(&diff, &diff), diff.into_iter().map(|d| 2.0 * d).collect::<Vec<_>>())
        }
        Objective::Iga { .. } => {
            let ng = l2_norm_slice(&g);
            let nt = l2_norm_slice(t);
            if ng == 0.0 {
                (1.0, vec![0.0; g.len()])
            } else {
                let cos = dot_slices(&g, t) / (ng * nt);
                let gbar = g.iter().zip(t).map(|(gi, ti)| -ti / (ng * nt) + cos * gi / (ng * ng)).collect();
                (1.0 - cos, gbar)
            }
        }
    };

    let w1_len = hidden * n;
    let gw1 = &gbar[..w1_len];
    let gb1 = &gbar[w1_len..w1_len + hidden];
    let gw2 = &gbar[w1_len + hidden..w1_len + hidden + classes * hidden];
    let gb2 = &gbar[w1_len + hidden + classes * hidden..];

    // Adjoints of the backward-pass quantities.
    let mut x_bar = vec![0.0; n];
    let mut dact_bar = vec![0.0; hidden];
    for j in 0..hidden {
        let row = &gw1[j * n..(j + 1) * n];
        dact_bar[j] = dot_slices(row, xs) + gb1[j];
        for (xb, r) in x_bar.iter_mut().zip(row) {
            *xb += r * dact[j];
        }
    }
    let dh_bar: Vec<f64> = dact_bar.iter().zip(&h).map(|(d, t)| d * (1.0 - t * t)).collect();
    let mut h_bar: Vec<f64> = (0..hidden).map(|j| dact_bar[j] * dh[j] * (-2.0 * h[j])).collect();
    let mut dz_bar = vec![0.0; classes];
    for k in 0..classes {
        let row = &gw2[k * hidden..(k + 1) * hidden];
        dz_bar[k] = dot_slices(row, &h) + gb2[k] + dot_slices(&w2[k * hidden..(k + 1) * hidden], &dh_bar);
        for (hb, r) in h_bar.iter_mut().zip(row) {
            *hb += r * dz[k];
        }
    }

    // Through p = softmax(z) and the forward pass.
    let pdot = dot_slices(&p, &dz_bar);
    let z_bar: Vec<f64> = p.iter().zip(&dz_bar).map(|(pk, b)| pk * (b - pdot)).collect();
    for (k, zb) in z_bar.iter().enumerate() {
        for (hb, w) in h_bar.iter_mut().zip(&w2[k * hidden..(k + 1) * hidden]) {
            *hb += w * zb;
        }
    }
    for j in 0..hidden {
        let a_bar = h_bar[j] * (1.0 - h[j] * h[j]);
        for (xb, w) in x_bar.iter_mut().zip(&w1[j * n..(j + 1) * n]) {
            *xb += w * a_bar;
        }
    }

    let label_grad = match labels {
        Labels::Known(_) => None,
        Labels::Logits(_) => {
            let y_bar: Vec<f64> = dz_bar.iter().map(|v| -v).collect();
            let ydot = dot_slices(&y, &y_bar);
            Some(y.iter().zip(&y_bar).map(|(yk, b)| yk * (b - ydot)).collect())
        }
    };
    Ok((loss, InputGradient { pixels: x_bar, labels: label_grad }))
}
