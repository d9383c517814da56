//! Area-average resampling with fractional pixel overlaps.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// `(source index, overlap)` pairs for every output cell along one axis.
fn overlaps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let w = (hi.min(s as f64 + 1.0) - lo.max(s as f64)) / scale;
                    (w > 0.0).then_some((s, w))
                })
                .collect()
        })
        .collect()
}

/// Each output pixel is the overlap-weighted mean of the source pixels its
/// footprint covers, so the image mean is preserved.
pub fn area_resize(x: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidParameter(format!("resize target {height}x{width} must be positive")));
    }
    let (h, w, c) = x.shape();
    let rows = overlaps(h, height);
    let cols = overlaps(w, width);
    let mut out = vec![0.0; height * width * c];
    for (oy, row) in rows.iter().enumerate() {
        for (ox, col) in cols.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for &(sy, wy) in row {
                    for &(sx, wx) in col {
                        acc += wy * wx * x.get(sy, sx, ch);
                    }
                }
                out[(oy * width + ox) * c + ch] = acc;
            }
        }
    }
    ImageTensor::new(height, width, c, out)
}
