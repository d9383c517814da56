//! Dense `f64` vectors and channel-last images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense, non-empty vector of finite `f64` values.
///
/// Flattened gradients and parameter vectors are carried in this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatVector(Vec<f64>);

impl FlatVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("vector"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(FlatVector(data))
    }

    /// Wraps data produced by code that already guarantees the invariants.
    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        FlatVector(data)
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "FlatVector must be non-empty");
        FlatVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &FlatVector) -> Result<f64> {
        check_len(self.len(), other.len())?;
        Ok(dot_slices(&self.0, &other.0))
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm_slice(&self.0)
    }

    pub fn scaled(&self, factor: f64) -> FlatVector {
        FlatVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &FlatVector) -> Result<()> {
        check_len(self.len(), other.len())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &FlatVector) -> Result<FlatVector> {
        check_len(self.len(), other.len())?;
        Ok(FlatVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    /// Componentwise mean of a non-empty list of equal-length vectors.
    pub fn mean(vs: &[FlatVector]) -> Result<FlatVector> {
        let first = vs.first().ok_or(Error::Empty("vector list"))?;
        let mut acc = vec![0.0; first.len()];
        for v in vs {
            check_len(first.len(), v.len())?;
            for (a, b) in acc.iter_mut().zip(&v.0) {
                *a += b;
            }
        }
        let n = vs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(FlatVector(acc))
    }
}

impl std::ops::Index<usize> for FlatVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, actual })
    }
}

pub fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm, rescaled to avoid overflow/underflow for extreme magnitudes.
pub fn l2_norm_slice(a: &[f64]) -> f64 {
    let max = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 || !max.is_finite() {
        return max;
    }
    if (1e-150..1e150).contains(&max) {
        return a.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    max * a.iter().map(|v| (v / max) * (v / max)).sum::<f64>().sqrt()
}

/// An image stored row-major and channel-last: index `(y * width + x) * channels + c`.
///
/// Pixel values are nominally in `[0, 1]`. Unconstrained optimisers (DLG) may
/// carry iterates outside that box; [`ImageTensor::clamp_unit`] projects back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::ShapeMismatch(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        check_len(height * width * channels, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(ImageTensor { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageTensor::new(height, width, channels, vec![value; height * width * channels])
            .expect("positive dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<ImageTensor> {
        ImageTensor::new(self.height, self.width, self.channels, data)
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn in_unit_box(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}
