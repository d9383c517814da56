//! Noise mechanisms: von Mises-Fisher directional noise and additive Gaussian noise.
//!
//! The VMF mechanism with concentration `epsilon` and mean direction `mu` has
//! density `C_K(epsilon) * exp(epsilon * mu . x)` on the unit sphere in `R^K`.
//! Sampling uses the tangent-normal decomposition: the cosine `w = mu . x` is
//! drawn with Wood's rejection scheme, the tangent direction uniformly, and the
//! result is rotated from the pole `e_1` onto `mu`.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sphere::{angular_distance, rotate_pole_to_in_place, UnitVector};
use crate::tensor::{check_len, dot_slices, FlatVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmfParams {
    pub epsilon_v: f64,
    pub dim: usize,
}

impl VmfParams {
    pub fn new(epsilon_v: f64, dim: usize) -> Result<Self> {
        if !(epsilon_v > 0.0 && epsilon_v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "VMF epsilon must be positive and finite, got {epsilon_v}"
            )));
        }
        if dim < 2 {
            return Err(Error::InvalidParameter(format!("VMF dimension must be >= 2, got {dim}")));
        }
        Ok(VmfParams { epsilon_v, dim })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussParams {
    pub sigma: f64,
}

impl GaussParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Gaussian sigma must be non-negative and finite, got {sigma}"
            )));
        }
        Ok(GaussParams { sigma })
    }
}

/// Draws one sample from the VMF distribution centred on `mu`.
pub fn vmf_sample(params: &VmfParams, mu: &UnitVector, rng: RngStream) -> Result<UnitVector> {
    vmf_sample_with(params, mu, &mut rng.rng())
}

pub fn vmf_sample_with<R: Rng + ?Sized>(
    params: &VmfParams,
    mu: &UnitVector,
    rng: &mut R,
) -> Result<UnitVector> {
    check_len(params.dim, mu.dim())?;
    let mut x = sample_about_pole(params.epsilon_v, params.dim, rng);
    rotate_pole_to_in_place(mu.as_slice(), &mut x);
    Ok(UnitVector::from_raw(x))
}

/// A VMF sample about `e_1`, before rotation.
pub(crate) fn sample_about_pole<R: Rng + ?Sized>(kappa: f64, dim: usize, rng: &mut R) -> Vec<f64> {
    let (w, one_minus_w) = sample_cosine(kappa, dim, rng);
    let radial = (one_minus_w * (1.0 + w)).max(0.0).sqrt();
    let mut x = vec![0.0; dim];
    x[0] = w;
    let tangent = &mut x[1..];
    loop {
        let mut norm_sq = 0.0;
        for t in tangent.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *t = g;
            norm_sq += g * g;
        }
        if norm_sq > 0.0 {
            let scale = radial / norm_sq.sqrt();
            tangent.iter_mut().for_each(|t| *t *= scale);
            break;
        }
    }
    x
}

/// Draws the cosine `w = mu . x` of a VMF sample, returning `(w, 1 - w)`.
///
/// Wood's envelope: `b = (K-1) / (2 kappa + sqrt(4 kappa^2 + (K-1)^2))`,
/// `x0 = (1-b)/(1+b)`, proposal `w = (1 - (1+b) z) / (1 - (1-b) z)` with
/// `z ~ Beta((K-1)/2, (K-1)/2)`. The acceptance test
/// `kappa (w - x0) + (K-1) ln((1 - x0 w)/(1 - x0^2)) >= ln u` is rewritten in
/// closed forms free of the `1 - x0 w` cancellation that appears when kappa is
/// large, and `1 - w` is returned from the same closed form for the same reason.
pub fn sample_cosine<R: Rng + ?Sized>(kappa: f64, dim: usize, rng: &mut R) -> (f64, f64) {
    let m1 = (dim - 1) as f64;
    let b = m1 / (2.0 * kappa + (4.0 * kappa * kappa + m1 * m1).sqrt());
    let beta = Beta::new(m1 / 2.0, m1 / 2.0).expect("positive shape");
    loop {
        let z: f64 = beta.sample(rng);
        let denom = 1.0 - (1.0 - b) * z;
        let w = (1.0 - (1.0 + b) * z) / denom;
        let one_minus_w = 2.0 * b * z / denom;
        // w - x0 = 2b(1 - 2z) / ((1+b) denom); (1 - x0 w)/(1 - x0^2) = (1+b) / (2 denom)
        let w_minus_x0 = 2.0 * b * (1.0 - 2.0 * z) / ((1.0 + b) * denom);
        let log_ratio = ((1.0 + b) / (2.0 * denom)).ln();
        let u: f64 = rng.random();
        if kappa * w_minus_x0 + m1 * log_ratio >= u.ln() {
            return (w, one_minus_w);
        }
    }
}

/// `epsilon * mu . x`; the normaliser is omitted since it cancels in density ratios.
pub fn vmf_log_density_unnormalized(params: &VmfParams, mu: &UnitVector, x: &UnitVector) -> Result<f64> {
    Ok(params.epsilon_v * mu.dot(x)?)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every coordinate.
pub fn gauss_perturb(params: &GaussParams, g: &FlatVector, rng: RngStream) -> FlatVector {
    let mut out = g.clone();
    if params.sigma == 0.0 {
        return out;
    }
    let mut r = rng.rng();
    for v in out.as_mut_slice() {
        let n: f64 = StandardNormal.sample(&mut r);
        *v += params.sigma * n;
    }
    out
}

/// `log p(x | mu1) - log p(x | mu2) - epsilon * d(mu1, mu2)`.
///
/// The directional-privacy guarantee says this is never positive.
pub fn privacy_ratio_check(
    params: &VmfParams,
    mu1: &UnitVector,
    mu2: &UnitVector,
    x: &UnitVector,
) -> Result<f64> {
    check_len(mu1.dim(), mu2.dim())?;
    check_len(mu1.dim(), x.dim())?;
    let diff: Vec<f64> = mu1.as_slice().iter().zip(mu2.as_slice()).map(|(a, b)| a - b).collect();
    let log_ratio = params.epsilon_v * dot_slices(&diff, x.as_slice());
    Ok(log_ratio - params.epsilon_v * angular_distance(mu1, mu2)?)
}
