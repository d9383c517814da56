//! Classification and reconstruction-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_len, FlatVector, ImageTensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of pixel values.
pub const SSIM_RANGE: f64 = 1.0;

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(preds: &[FlatVector], labels: &[usize]) -> Result<f64> {
    top_k_accuracy(preds, labels, 1)
}

/// Fraction of examples whose label is among the `k` highest logits.
///
/// A label counts as in the top `k` when fewer than `k` classes outrank it,
/// where class `j` outranks the label if its logit is larger, or equal with a
/// lower index.
pub fn top_k_accuracy(preds: &[FlatVector], labels: &[usize], k: usize) -> Result<f64> {
    check_len(preds.len(), labels.len())?;
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let mut hits = 0usize;
    for (logits, &label) in preds.iter().zip(labels) {
        let z = logits.as_slice();
        if k == 0 || k > z.len() {
            return Err(Error::InvalidParameter(format!("k = {k} outside 1..={}", z.len())));
        }
        if label >= z.len() {
            return Err(Error::InvalidParameter(format!("label {label} out of range")));
        }
        let target = z[label];
        let outranking = z
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < label))
            .count();
        if outranking < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds.len() as f64)
}

fn check_shapes(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// Mean structural similarity, averaged over channels.
///
/// Gaussian-weighted 11x11 windows (sigma 1.5) at every valid position, with
/// `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2`, `L = 1`. Planes smaller than the window
/// in either dimension use one uniformly weighted window covering the whole
/// plane. The result is not clamped and can be negative.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w, c) = a.shape();
    let total: f64 = (0..c).map(|ch| ssim_plane(&a.channel(ch), &b.channel(ch), h, w)).sum();
    Ok(total / c as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let weights = vec![1.0 / (h * w) as f64; h * w];
        return window_ssim(a, b, &weights, |i| i);
    }
    let weights = gaussian_window();
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            sum += window_ssim(a, b, &weights, |i| {
                (r + i / SSIM_WINDOW) * w + c + i % SSIM_WINDOW
            });
            count += 1;
        }
    }
    sum / count as f64
}

fn window_ssim(a: &[f64], b: &[f64], weights: &[f64], index: impl Fn(usize) -> usize) -> f64 {
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let (mut mu_a, mut mu_b) = (0.0, 0.0);
    for (i, wt) in weights.iter().enumerate() {
        let p = index(i);
        mu_a += wt * a[p];
        mu_b += wt * b[p];
    }
    let (mut var_a, mut var_b, mut cov) = (0.0, 0.0, 0.0);
    for (i, wt) in weights.iter().enumerate() {
        let p = index(i);
        let (da, db) = (a[p] - mu_a, b[p] - mu_b);
        var_a += wt * da * da;
        var_b += wt * db * db;
        cov += wt * da * db;
    }
    ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}

/// Table-style summary: mean SSIM and median MSE over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean_ssim: f64,
    pub median_mse: f64,
    pub per_image: Vec<(f64, f64)>,
}

pub fn summarize(per_image: &[(f64, f64)]) -> Result<MetricSummary> {
    if per_image.is_empty() {
        return Err(Error::Empty("per-image metrics"));
    }
    let mean_ssim = per_image.iter().map(|p| p.0).sum::<f64>() / per_image.len() as f64;
    Ok(MetricSummary { mean_ssim, median_mse: median(per_image.iter().map(|p| p.1)), per_image: per_image.to_vec() })
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    assert!(!v.is_empty(), "median of empty set");
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use rand::Rng;

    fn logits(v: &[f64]) -> FlatVector {
        FlatVector::new(v.to_vec()).unwrap()
    }

    fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageTensor {
        let mut r = RngStream::new(seed).rng();
        ImageTensor::new(h, w, c, (0..h * w * c).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let preds = vec![logits(&[1.0, 0.0]), logits(&[0.0, 1.0])];
        assert_eq!(accuracy(&preds, &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&preds, &[1, 0]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&preds, &[0]).is_err());
    }

    #[test]
    fn accuracy_ties_go_to_lowest_index() {
        let preds = vec![logits(&[0.5, 0.5, 0.1])];
        assert_eq!(accuracy(&preds, &[0]).unwrap(), 1.0);
        assert_eq!(accuracy(&preds, &[1]).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&preds, &[1], 2).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_hand_count() {
        let mut r = RngStream::new(3).rng();
        let preds: Vec<_> = (0..100)
            .map(|_| logits(&(0..5).map(|_| r.random::<f64>()).collect::<Vec<_>>()))
            .collect();
        let labels: Vec<usize> = (0..100).map(|_| r.random_range(0..5)).collect();
        let mut count = 0;
        for (p, &y) in preds.iter().zip(&labels) {
            let s = p.as_slice();
            let best = (0..5).fold(0, |b, i| if s[i] > s[b] { i } else { b });
            if best == y {
                count += 1;
            }
        }
        assert_eq!(accuracy(&preds, &labels).unwrap(), count as f64 / 100.0);
    }

    #[test]
    fn top_k_examples() {
        let preds = vec![logits(&[0.1, 0.5, 0.4])];
        assert_eq!(top_k_accuracy(&preds, &[2], 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&preds, &[2], 2).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&preds, &[0], 3).unwrap(), 1.0);
        assert!(top_k_accuracy(&preds, &[0], 0).is_err());
        assert!(top_k_accuracy(&preds, &[0], 4).is_err());
    }

    #[test]
    fn top_k_is_monotone_in_k() {
        let mut r = RngStream::new(4).rng();
        for _ in 0..20 {
            let preds: Vec<_> = (0..50)
                .map(|_| logits(&(0..12).map(|_| r.random::<f64>()).collect::<Vec<_>>()))
                .collect();
            let labels: Vec<usize> = (0..50).map(|_| r.random_range(0..12)).collect();
            let accs: Vec<f64> = (1..=12).map(|k| top_k_accuracy(&preds, &labels, k).unwrap()).collect();
            assert_eq!(accs[0], accuracy(&preds, &labels).unwrap());
            assert!(accs.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(accs[11], 1.0);
        }
    }

    #[test]
    fn mse_examples() {
        let x = random_image(5, 6, 6, 2);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        let zeros = ImageTensor::filled(4, 4, 1, 0.0);
        let ones = ImageTensor::filled(4, 4, 1, 1.0);
        assert_eq!(mse(&zeros, &ones).unwrap(), 1.0);
        assert!(mse(&zeros, &x).is_err());

        let (a, b) = (random_image(6, 5, 7, 3), random_image(7, 5, 7, 3));
        let mut oracle = 0.0;
        for r in 0..5 {
            for c in 0..7 {
                for ch in 0..3 {
                    oracle += (a.get(r, c, ch) - b.get(r, c, ch)).powi(2);
                }
            }
        }
        assert!((mse(&a, &b).unwrap() - oracle / 105.0).abs() < 1e-12);
        assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
    }

    #[test]
    fn ssim_identical_is_one() {
        for (h, w, c) in [(8, 8, 1), (16, 16, 1), (28, 28, 3), (11, 30, 2)] {
            let x = random_image(8, h, w, c);
            assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_constant_images() {
        // (2*0*1 + C1)(0 + C2) / ((0 + 1 + C1)(0 + 0 + C2)) = C1 / (1 + C1)
        let c1 = 1e-4;
        for size in [8, 16] {
            let zeros = ImageTensor::filled(size, size, 1, 0.0);
            let ones = ImageTensor::filled(size, size, 1, 1.0);
            let s = ssim(&zeros, &ones).unwrap();
            assert!((s - c1 / (1.0 + c1)).abs() < 1e-15);
            assert!(s < 0.01);
        }
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        for seed in 0..10_000 {
            let size = if seed % 2 == 0 { 8 } else { 14 };
            let a = random_image(seed, size, size, 1);
            let b = random_image(seed + 1000, size, size, 1);
            let ab = ssim(&a, &b).unwrap();
            assert!((ab - ssim(&b, &a).unwrap()).abs() <= 1e-12);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ssim_detects_inversion() {
        let a = random_image(9, 16, 16, 1);
        let inv = a.with_data(a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn summarize_examples() {
        let one = summarize(&[(0.5, 0.25)]).unwrap();
        assert_eq!((one.mean_ssim, one.median_mse), (0.5, 0.25));
        let robust = summarize(&[(0.0, 1.0), (0.0, 2.0), (0.0, 1e9)]).unwrap();
        assert_eq!(robust.median_mse, 2.0);
        let even = summarize(&[(1.0, 4.0), (0.0, 1.0), (0.5, 3.0), (0.5, 2.0)]).unwrap();
        assert_eq!(even.median_mse, 2.5);
        assert_eq!(even.mean_ssim, 0.5);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn summarize_matches_sort_oracle() {
        let mut r = RngStream::new(10).rng();
        for n in 1..30 {
            let items: Vec<(f64, f64)> = (0..n).map(|_| (r.random::<f64>(), r.random::<f64>() * 100.0)).collect();
            let s = summarize(&items).unwrap();
            let mut m: Vec<f64> = items.iter().map(|p| p.1).collect();
            m.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let oracle = if n % 2 == 1 { m[n / 2] } else { (m[n / 2 - 1] + m[n / 2]) / 2.0 };
            assert_eq!(s.median_mse, oracle);
        }
    }
}
