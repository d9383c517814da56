//! Small differentiable classifiers with exact backpropagation.
//!
//! Parameters live in one flat buffer ordered layer by layer, weights before
//! biases, so flattening is a copy and per-example gradients share the layout.
//! Dense weights are `(outputs, inputs)` row-major; convolution weights are
//! `(out_channels, in_channels, k, k)`.

mod arch;
pub mod checkpoint;
pub mod gradcheck;

pub use arch::{Architecture, LayerKind, LayerLayout, DEFAULT_MLP_HIDDEN, LENET_KERNEL};
pub(crate) use arch::Op;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{check_len, FlatVector, ImageTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    arch: Architecture,
    data: Vec<f64>,
}

impl NetworkParams {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation for weights and biases.
    pub fn init(arch: Architecture, rng: RngStream) -> Result<Self> {
        arch.validate()?;
        let mut r = rng.rng();
        let mut data = vec![0.0; arch.param_count()];
        for layer in arch.layout() {
            let bound = 1.0 / (layer.fan_in() as f64).sqrt();
            let end = layer.bias_offset + layer.bias_len;
            for v in &mut data[layer.weight_offset..end] {
                *v = r.random_range(-bound..bound);
            }
        }
        Ok(NetworkParams { arch, data })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(NetworkParams { arch, data: vec![0.0; arch.param_count()] })
    }

    pub fn from_flat(arch: Architecture, flat: FlatVector) -> Result<Self> {
        arch.validate()?;
        check_len(arch.param_count(), flat.len())?;
        Ok(NetworkParams { arch, data: flat.into_inner() })
    }

    pub fn flatten(&self) -> FlatVector {
        FlatVector::from_raw(self.data.clone())
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `(weights, biases)` of layer `i`.
    pub fn layer(&self, i: usize) -> (&[f64], &[f64]) {
        let l = self.arch.layout()[i];
        (
            &self.data[l.weight_offset..l.weight_offset + l.weight_len],
            &self.data[l.bias_offset..l.bias_offset + l.bias_len],
        )
    }

    /// `theta <- theta - step * direction`
    pub fn descend(&mut self, step: f64, direction: &FlatVector) -> Result<()> {
        check_len(self.data.len(), direction.len())?;
        for (t, d) in self.data.iter_mut().zip(direction.as_slice()) {
            *t -= step * d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub x: ImageTensor,
    pub y: usize,
}

impl LabeledExample {
    pub fn new(x: ImageTensor, y: usize) -> Self {
        LabeledExample { x, y }
    }
}

/// One flattened gradient per example, all with the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGrads {
    pub grads: Vec<FlatVector>,
}

impl PerExampleGrads {
    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn mean(&self) -> Result<FlatVector> {
        FlatVector::mean(&self.grads)
    }
}

/// Loss and gradients of the soft-label cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelGrads {
    pub loss: f64,
    pub params: FlatVector,
    /// Gradient w.r.t. the input pixels, in the image's channel-last layout.
    pub input: Vec<f64>,
    /// Gradient w.r.t. the label probabilities, `-log softmax(logits)`.
    pub labels: Vec<f64>,
}

pub fn forward(params: &NetworkParams, x: &ImageTensor) -> Result<FlatVector> {
    let input = to_internal(params.arch, x)?;
    let tape = Tape::record(params, input);
    Ok(FlatVector::from_raw(tape.output().to_vec()))
}

/// Cross-entropy loss against the true class and its exact gradient.
pub fn loss_and_grad(params: &NetworkParams, ex: &LabeledExample) -> Result<(f64, FlatVector)> {
    let target = one_hot(params.arch.classes(), ex.y)?;
    let input = to_internal(params.arch, &ex.x)?;
    let tape = Tape::record(params, input);
    let (loss, d_logits) = softmax_cross_entropy(tape.output(), &target);
    let mut grad = vec![0.0; params.len()];
    tape.backward(params, &d_logits, &mut grad, false);
    Ok((loss, FlatVector::from_raw(grad)))
}

pub fn per_example_grads(params: &NetworkParams, batch: &[LabeledExample]) -> Result<PerExampleGrads> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let grads = batch
        .par_iter()
        .map(|ex| loss_and_grad(params, ex).map(|(_, g)| g))
        .collect::<Result<Vec<_>>>()?;
    Ok(PerExampleGrads { grads })
}

/// Mean loss over a batch and its gradient, accumulated in one buffer.
pub fn mean_loss_and_grad(params: &NetworkParams, batch: &[LabeledExample]) -> Result<(f64, FlatVector)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    for ex in batch {
        let target = one_hot(params.arch.classes(), ex.y)?;
        let tape = Tape::record(params, to_internal(params.arch, &ex.x)?);
        let (loss, mut d_logits) = softmax_cross_entropy(tape.output(), &target);
        d_logits.iter_mut().for_each(|d| *d /= n);
        tape.backward(params, &d_logits, &mut grad, false);
        total += loss;
    }
    Ok((total / n, FlatVector::from_raw(grad)))
}

/// Cross-entropy against a probability vector, with gradients for parameters,
/// input pixels and label probabilities.
pub fn soft_label_loss_and_grads(
    params: &NetworkParams,
    x: &ImageTensor,
    y_soft: &[f64],
) -> Result<SoftLabelGrads> {
    check_len(params.arch.classes(), y_soft.len())?;
    let input = to_internal(params.arch, x)?;
    let tape = Tape::record(params, input);
    let logits = tape.output();
    let (loss, d_logits) = softmax_cross_entropy(logits, y_soft);
    let mut grad = vec![0.0; params.len()];
    let d_input = tape.backward(params, &d_logits, &mut grad, true).expect("input gradient requested");
    let labels = log_softmax(logits).into_iter().map(|v| -v).collect();
    Ok(SoftLabelGrads {
        loss,
        params: FlatVector::from_raw(grad),
        input: from_internal(params.arch, &d_input),
        labels,
    })
}

pub fn one_hot(classes: usize, y: usize) -> Result<Vec<f64>> {
    if y >= classes {
        return Err(Error::InvalidParameter(format!("label {y} out of range for {classes} classes")));
    }
    let mut v = vec![0.0; classes];
    v[y] = 1.0;
    Ok(v)
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// `-sum_c y_c log p_c` and its gradient `p * sum(y) - y` w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let mass: f64 = target.iter().sum();
    let loss = -logp.iter().zip(target).map(|(l, t)| l * t).sum::<f64>();
    let grad = logp.iter().zip(target).map(|(l, t)| l.exp() * mass - t).collect();
    (loss, grad)
}

/// Converts a channel-last image into the network's input layout.
pub(crate) fn to_internal(arch: Architecture, x: &ImageTensor) -> Result<Vec<f64>> {
    let expected = arch.input_shape();
    if x.shape() != expected {
        return Err(Error::ShapeMismatch(format!(
            "input is {:?}, {} expects {:?}",
            x.shape(),
            arch.tag(),
            expected
        )));
    }
    Ok(match arch {
        Architecture::Mlp { .. } => x.data().to_vec(),
        Architecture::LenetSmall { .. } => {
            let (h, w, c) = expected;
            let mut out = vec![0.0; h * w * c];
            for (i, v) in x.data().iter().enumerate() {
                let ch = i % c;
                let pix = i / c;
                out[ch * h * w + pix] = *v;
            }
            out
        }
    })
}

pub(crate) fn from_internal(arch: Architecture, v: &[f64]) -> Vec<f64> {
    match arch {
        Architecture::Mlp { .. } => v.to_vec(),
        Architecture::LenetSmall { height, width, channels, .. } => {
            let plane = height * width;
            let mut out = vec![0.0; v.len()];
            for (i, o) in out.iter_mut().enumerate() {
                *o = v[(i % channels) * plane + i / channels];
            }
            out
        }
    }
}

/// Activations recorded during a forward pass.
pub(crate) struct Tape {
    ops: Vec<Op>,
    /// `acts[0]` is the input; `acts[k + 1]` is the output of `ops[k]`.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub(crate) fn record(params: &NetworkParams, input: Vec<f64>) -> Tape {
        let ops = params.arch.ops();
        let layout = params.arch.layout();
        let mut acts = Vec::with_capacity(ops.len() + 1);
        acts.push(input);
        for op in &ops {
            let x = acts.last().expect("input present");
            let y = match *op {
                Op::Dense { layer } => dense_forward(params, &layout[layer], x),
                Op::Conv { layer, height, width } => conv_forward(params, &layout[layer], x, height, width),
                Op::Tanh => x.iter().map(|v| v.tanh()).collect(),
                Op::Sigmoid => x.iter().map(|v| sigmoid(*v)).collect(),
                Op::AvgPool2 { channels, height, width } => avgpool_forward(x, channels, height, width),
            };
            acts.push(y);
        }
        Tape { ops, acts }
    }

    pub(crate) fn output(&self) -> &[f64] {
        self.acts.last().expect("output present")
    }

    #[cfg(test)]
    pub(crate) fn act(&self, k: usize) -> &[f64] {
        &self.acts[k]
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient when asked.
    pub(crate) fn backward(
        &self,
        params: &NetworkParams,
        d_out: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let layout = params.arch.layout();
        let mut dy = d_out.to_vec();
        for (k, op) in self.ops.iter().enumerate().rev() {
            let x = &self.acts[k];
            let y = &self.acts[k + 1];
            let need_dx = k > 0 || want_input;
            dy = match *op {
                Op::Dense { layer } => dense_backward(params, &layout[layer], x, &dy, grad, need_dx),
                Op::Conv { layer, height, width } => {
                    conv_backward(params, &layout[layer], x, &dy, grad, height, width, need_dx)
                }
                Op::Tanh => dy.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect(),
                Op::Sigmoid => dy.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect(),
                Op::AvgPool2 { channels, height, width } => avgpool_backward(&dy, channels, height, width),
            };
        }
        want_input.then_some(dy)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn dense_dims(layer: &LayerLayout) -> (usize, usize) {
    match layer.kind {
        LayerKind::Dense { inputs, outputs } => (inputs, outputs),
        LayerKind::Conv { .. } => unreachable!("dense op on conv layer"),
    }
}

fn dense_forward(params: &NetworkParams, layer: &LayerLayout, x: &[f64]) -> Vec<f64> {
    let (inputs, outputs) = dense_dims(layer);
    let w = &params.data[layer.weight_offset..layer.weight_offset + layer.weight_len];
    let b = &params.data[layer.bias_offset..layer.bias_offset + layer.bias_len];
    (0..outputs)
        .map(|o| b[o] + w[o * inputs..(o + 1) * inputs].iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

fn dense_backward(
    params: &NetworkParams,
    layer: &LayerLayout,
    x: &[f64],
    dy: &[f64],
    grad: &mut [f64],
    need_dx: bool,
) -> Vec<f64> {
    let (inputs, outputs) = dense_dims(layer);
    let w = &params.data[layer.weight_offset..layer.weight_offset + layer.weight_len];
    let (gw, rest) = grad[layer.weight_offset..].split_at_mut(layer.weight_len);
    let gb = &mut rest[..layer.bias_len];
    let mut dx = if need_dx { vec![0.0; inputs] } else { Vec::new() };
    for o in 0..outputs {
        let d = dy[o];
        gb[o] += d;
        let row = &mut gw[o * inputs..(o + 1) * inputs];
        for (g, xi) in row.iter_mut().zip(x) {
            *g += d * xi;
        }
        if need_dx {
            for (dxi, wi) in dx.iter_mut().zip(&w[o * inputs..(o + 1) * inputs]) {
                *dxi += d * wi;
            }
        }
    }
    dx
}

fn conv_dims(layer: &LayerLayout) -> (usize, usize, usize) {
    match layer.kind {
        LayerKind::Conv { in_channels, out_channels, kernel } => (in_channels, out_channels, kernel),
        LayerKind::Dense { .. } => unreachable!("conv op on dense layer"),
    }
}

fn conv_forward(params: &NetworkParams, layer: &LayerLayout, x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (cin, cout, k) = conv_dims(layer);
    let pad = k / 2;
    let wt = &params.data[layer.weight_offset..layer.weight_offset + layer.weight_len];
    let b = &params.data[layer.bias_offset..layer.bias_offset + layer.bias_len];
    let mut y = vec![0.0; cout * h * w];
    for o in 0..cout {
        for r in 0..h {
            for c in 0..w {
                let mut acc = b[o];
                for i in 0..cin {
                    for kr in 0..k {
                        let Some(rr) = (r + kr).checked_sub(pad).filter(|&v| v < h) else { continue };
                        for kc in 0..k {
                            let Some(cc) = (c + kc).checked_sub(pad).filter(|&v| v < w) else { continue };
                            acc += wt[((o * cin + i) * k + kr) * k + kc] * x[(i * h + rr) * w + cc];
                        }
                    }
                }
                y[(o * h + r) * w + c] = acc;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    params: &NetworkParams,
    layer: &LayerLayout,
    x: &[f64],
    dy: &[f64],
    grad: &mut [f64],
    h: usize,
    w: usize,
    need_dx: bool,
) -> Vec<f64> {
    let (cin, cout, k) = conv_dims(layer);
    let pad = k / 2;
    let wt = &params.data[layer.weight_offset..layer.weight_offset + layer.weight_len];
    let (gw, rest) = grad[layer.weight_offset..].split_at_mut(layer.weight_len);
    let gb = &mut rest[..layer.bias_len];
    let mut dx = if need_dx { vec![0.0; cin * h * w] } else { Vec::new() };
    for o in 0..cout {
        for r in 0..h {
            for c in 0..w {
                let d = dy[(o * h + r) * w + c];
                gb[o] += d;
                for i in 0..cin {
                    for kr in 0..k {
                        let Some(rr) = (r + kr).checked_sub(pad).filter(|&v| v < h) else { continue };
                        for kc in 0..k {
                            let Some(cc) = (c + kc).checked_sub(pad).filter(|&v| v < w) else { continue };
                            let wi = ((o * cin + i) * k + kr) * k + kc;
                            let xi = (i * h + rr) * w + cc;
                            gw[wi] += d * x[xi];
                            if need_dx {
                                dx[xi] += d * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn avgpool_forward(x: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![0.0; channels * ho * wo];
    for ch in 0..channels {
        for r in 0..ho {
            for c in 0..wo {
                let at = |dr: usize, dc: usize| x[(ch * h + 2 * r + dr) * w + 2 * c + dc];
                y[(ch * ho + r) * wo + c] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    y
}

fn avgpool_backward(dy: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; channels * h * w];
    for ch in 0..channels {
        for r in 0..h {
            for c in 0..w {
                dx[(ch * h + r) * w + c] = 0.25 * dy[(ch * ho + r / 2) * wo + c / 2];
            }
        }
    }
    dx
}
