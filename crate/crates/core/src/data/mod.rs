//! Dataset ingestion: MNIST IDX files and a seeded synthetic generator.

mod mnist;
mod resize;

pub use mnist::{
    encode_images, encode_labels, load_mnist_idx, parse_images_header, read_images_header, ImagesHeader,
    IMAGES_MAGIC, LABELS_MAGIC,
};
pub use resize::area_resize;

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::LabeledExample;
use crate::rng::RngStream;
use crate::tensor::ImageTensor;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "test-images-idx3-ubyte";
pub const TEST_LABELS: &str = "test-labels-idx1-ubyte";

fn default_channels() -> usize {
    1
}

fn default_contrast() -> f64 {
    0.8
}

fn default_noise() -> f64 {
    0.05
}

/// Class-conditional blobs: class `c` puts a Gaussian bump at angle
/// `2 pi c / classes` on a ring around the image centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    #[serde(default)]
    pub n_test: usize,
    pub classes: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Bump amplitude above a 0.1 background, in `[0, 0.9]`.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Standard deviation of the per-pixel Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

pub const MAX_CONTRAST: f64 = 0.9;
const BACKGROUND: f64 = 0.1;

impl SynthSpec {
    pub fn new(n: usize, classes: usize, image_size: usize, seed: u64) -> Self {
        SynthSpec {
            n,
            n_test: 0,
            classes,
            image_size,
            channels: 1,
            contrast: default_contrast(),
            noise: default_noise(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("synthetic data needs >= 2 classes, got {}", self.classes)));
        }
        if self.n == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic n, image_size and channels must be positive".into()));
        }
        if !(0.0..=MAX_CONTRAST).contains(&self.contrast) {
            return Err(Error::Config(format!("contrast must lie in [0, {MAX_CONTRAST}], got {}", self.contrast)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    fn prototype(&self, class: usize) -> Vec<f64> {
        let s = self.image_size as f64;
        let angle = std::f64::consts::TAU * class as f64 / self.classes as f64;
        let cy = (s - 1.0) / 2.0 + 0.3 * s * angle.sin();
        let cx = (s - 1.0) / 2.0 + 0.3 * s * angle.cos();
        let width = (0.15 * s).max(0.5);
        let mut out = Vec::with_capacity(self.image_size * self.image_size * self.channels);
        for y in 0..self.image_size {
            for x in 0..self.image_size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let bump = (-d2 / (2.0 * width * width)).exp();
                for ch in 0..self.channels {
                    let tint = if self.channels == 1 {
                        1.0
                    } else {
                        0.5 + 0.5 * (angle + std::f64::consts::TAU * ch as f64 / self.channels as f64).cos()
                    };
                    out.push(BACKGROUND + self.contrast * bump * tint);
                }
            }
        }
        out
    }

    fn draw(&self, count: usize, rng: RngStream) -> Vec<LabeledExample> {
        let prototypes: Vec<Vec<f64>> = (0..self.classes).map(|c| self.prototype(c)).collect();
        let mut r = rng.rng();
        (0..count)
            .map(|i| {
                let y = i % self.classes;
                let data = prototypes[y]
                    .iter()
                    .map(|p| {
                        let z: f64 = r.sample(StandardNormal);
                        (p + self.noise * z).clamp(0.0, 1.0)
                    })
                    .collect();
                let x = ImageTensor::new(self.image_size, self.image_size, self.channels, data)
                    .expect("finite synthetic pixels");
                LabeledExample::new(x, y)
            })
            .collect()
    }

    /// Training examples with round-robin labels.
    pub fn generate(&self) -> Result<Vec<LabeledExample>> {
        self.validate()?;
        Ok(self.draw(self.n, RngStream::new(self.seed).child(0)))
    }

    /// `(train, test)`; the test split uses an independent stream.
    pub fn generate_split(&self) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
        let train = self.generate()?;
        let n_test = if self.n_test == 0 { self.n.div_ceil(4) } else { self.n_test };
        Ok((train, self.draw(n_test, RngStream::new(self.seed).child(1))))
    }
}

/// Convenience wrapper for [`SynthSpec::generate`].
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<LabeledExample>> {
    spec.generate()
}

fn default_n_train() -> usize {
    2000
}

fn default_n_test() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// A directory holding the four IDX files named by [`TRAIN_IMAGES`] and friends.
    MnistSubset {
        path: PathBuf,
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_test")]
        n_test: usize,
        /// Square side to area-average down to; native 28 when absent.
        #[serde(default)]
        image_size: Option<usize>,
    },
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Dataset {
    /// `(height, width, channels)` of every image.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.train[0].x.shape()
    }

    pub fn classes(&self) -> usize {
        self.train.iter().chain(&self.test).map(|e| e.y).max().unwrap_or(0) + 1
    }
}

fn load_split(dir: &Path, images: &str, labels: &str, n: usize, size: Option<usize>) -> Result<Vec<LabeledExample>> {
    let path = dir.join(images);
    let out = load_mnist_idx(&path, &dir.join(labels), Some(n), size)?;
    if out.len() < n {
        return Err(Error::data(path, format!("requested {n} examples, file holds {}", out.len())));
    }
    Ok(out)
}

impl DatasetSpec {
    /// Resolves relative MNIST paths against `base`.
    pub fn resolve(&self, base: &Path) -> DatasetSpec {
        match self {
            DatasetSpec::MnistSubset { path, n_train, n_test, image_size } if path.is_relative() => {
                DatasetSpec::MnistSubset { path: base.join(path), n_train: *n_train, n_test: *n_test, image_size: *image_size }
            }
            other => other.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::MnistSubset { path, n_train, n_test, image_size } => {
                if *n_train == 0 || *n_test == 0 || *image_size == Some(0) {
                    return Err(Error::Config("mnist n_train, n_test and image_size must be positive".into()));
                }
                if !path.is_dir() {
                    return Err(Error::data(path, "MNIST directory does not exist"));
                }
                Ok(())
            }
            DatasetSpec::Synthetic(s) => s.validate(),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        self.validate()?;
        let (train, test) = match self {
            DatasetSpec::MnistSubset { path, n_train, n_test, image_size } => (
                load_split(path, TRAIN_IMAGES, TRAIN_LABELS, *n_train, *image_size)?,
                load_split(path, TEST_IMAGES, TEST_LABELS, *n_test, *image_size)?,
            ),
            DatasetSpec::Synthetic(s) => s.generate_split()?,
        };
        Ok(Dataset { train, test })
    }

    /// Number of classes the model should predict.
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::MnistSubset { .. } => 10,
            DatasetSpec::Synthetic(s) => s.classes,
        }
    }
}
