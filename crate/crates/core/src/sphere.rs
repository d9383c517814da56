//! Unit-sphere geometry: normalisation, angular distance and pole rotation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_len, dot_slices, l2_norm_slice, FlatVector};

/// Maximum deviation from unit norm accepted by [`UnitVector::new`].
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// A point on the unit sphere in `R^K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitVector(FlatVector);

impl UnitVector {
    /// Checks that `v` already has unit norm.
    pub fn new(v: FlatVector) -> Result<Self> {
        let n = v.l2_norm();
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::InvalidParameter(format!("vector norm {n} is not 1")));
        }
        Ok(UnitVector(v))
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        UnitVector(FlatVector::from_raw(data))
    }

    /// The canonical pole `e_1` in `dim` dimensions.
    pub fn pole(dim: usize) -> Self {
        assert!(dim >= 1);
        let mut data = vec![0.0; dim];
        data[0] = 1.0;
        UnitVector::from_raw(data)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn as_flat(&self) -> &FlatVector {
        &self.0
    }

    pub fn into_flat(self) -> FlatVector {
        self.0
    }

    pub fn dot(&self, other: &UnitVector) -> Result<f64> {
        self.0.dot(&other.0)
    }
}

/// Projects a non-zero vector onto the unit sphere.
pub fn normalize(v: &FlatVector) -> Result<UnitVector> {
    let n = v.l2_norm();
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(UnitVector::from_raw(v.as_slice().iter().map(|x| x / n).collect()))
}

/// Great-circle distance `arccos(a . b)` in `[0, pi]`.
///
/// Evaluated as `2 atan2(|a - b|, |a + b|)`, equal on the sphere but accurate
/// near 0 and pi where `acos` of a rounded inner product loses half its digits.
pub fn angular_distance(a: &UnitVector, b: &UnitVector) -> Result<f64> {
    check_len(a.dim(), b.dim())?;
    let (mut minus, mut plus) = (0.0, 0.0);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        minus += (x - y) * (x - y);
        plus += (x + y) * (x + y);
    }
    Ok(2.0 * minus.sqrt().atan2(plus.sqrt()))
}

/// Applies the rotation `Q` with `Q e_1 = mu` to `x`.
///
/// `Q` is the rotation in the plane spanned by `e_1` and `mu` (identity on the
/// orthogonal complement), applied in O(K) without forming a matrix. When
/// `mu = -e_1` the plane is taken to be `(e_1, e_2)`.
pub fn rotate_pole_to(mu: &UnitVector, x: &UnitVector) -> Result<UnitVector> {
    check_len(mu.dim(), x.dim())?;
    let mut out = x.as_slice().to_vec();
    rotate_pole_to_in_place(mu.as_slice(), &mut out);
    Ok(UnitVector::from_raw(out))
}

pub(crate) fn rotate_pole_to_in_place(mu: &[f64], x: &mut [f64]) {
    let dim = mu.len();
    // w = mu - cos * e_1, the component of mu orthogonal to the pole
    let raw_sin = l2_norm_slice(&mu[1..]);
    let r = raw_sin.hypot(mu[0]);
    let (cos, sin) = (mu[0] / r, raw_sin / r);
    if sin == 0.0 {
        if cos > 0.0 {
            return;
        }
        // half-turn in the (e_1, e_2) plane
        x[0] = -x[0];
        if dim > 1 {
            x[1] = -x[1];
        }
        return;
    }
    // p: coordinate along e_1, q: coordinate along w_hat
    let p = x[0];
    let q = dot_slices(&mu[1..], &x[1..]) / raw_sin;
    let new_p = cos * p - sin * q;
    let new_q = sin * p + cos * q;
    x[0] = new_p;
    let dq = (new_q - q) / raw_sin;
    for (xi, wi) in x[1..].iter_mut().zip(&mu[1..]) {
        *xi += dq * wi;
    }
}
