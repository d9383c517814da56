//! MNIST IDX files: a big-endian `u32` magic (`0x803` images, `0x801`
//! labels), big-endian `u32` dimensions, then one unsigned byte per entry.

use std::fs;
use std::path::Path;

use super::resize::area_resize;
use crate::error::{Error, Result};
use crate::nn::LabeledExample;
use crate::tensor::ImageTensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Parsed header of an IDX image file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImagesHeader {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::data(path, "truncated IDX header"))
}

pub fn parse_images_header(bytes: &[u8], path: &Path) -> Result<ImagesHeader> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::data(path, format!("bad IDX image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    Ok(ImagesHeader {
        count: be_u32(bytes, 4, path)? as usize,
        rows: be_u32(bytes, 8, path)? as usize,
        cols: be_u32(bytes, 12, path)? as usize,
    })
}

/// Reads only the header of an image file.
pub fn read_images_header(path: &Path) -> Result<ImagesHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_images_header(&bytes, path)
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(Error::data(path, format!("bad IDX label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::data(path, format!("truncated: header promises {count} labels, found {}", body.len())));
    }
    Ok(body[..count].to_vec())
}

/// Loads up to `limit` examples with pixels scaled to `[0, 1]`, optionally
/// area-averaged down to `resize_to x resize_to`.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
    resize_to: Option<usize>,
) -> Result<Vec<LabeledExample>> {
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let header = parse_images_header(&image_bytes, images_path)?;
    let labels = parse_labels(&label_bytes, labels_path)?;
    if labels.len() != header.count {
        return Err(Error::data(
            labels_path,
            format!("{} labels but {} images in {}", labels.len(), header.count, images_path.display()),
        ));
    }
    let pixels = header.rows * header.cols;
    if pixels == 0 {
        return Err(Error::data(images_path, "zero-sized images"));
    }
    let body = &image_bytes[16..];
    if body.len() < header.count * pixels {
        return Err(Error::data(
            images_path,
            format!("truncated: header promises {} bytes of pixels, found {}", header.count * pixels, body.len()),
        ));
    }
    let n = limit.map_or(header.count, |l| l.min(header.count));
    (0..n)
        .map(|i| {
            let data = body[i * pixels..(i + 1) * pixels].iter().map(|&b| b as f64 / 255.0).collect();
            let mut x = ImageTensor::new(header.rows, header.cols, 1, data)?;
            if let Some(side) = resize_to {
                if side != header.rows || side != header.cols {
                    x = area_resize(&x, side, side)?;
                }
            }
            let y = labels[i] as usize;
            if y > 9 {
                return Err(Error::data(labels_path, format!("label {y} at index {i} is not a digit")));
            }
            Ok(LabeledExample::new(x, y))
        })
        .collect()
}

/// Writes IDX files; used to build fixtures.
pub fn encode_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
