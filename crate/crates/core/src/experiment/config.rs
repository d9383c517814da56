use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, AttackInit, AttackMethod, HvpMode, DEFAULT_ALPHA_TV, DEFAULT_ITERATIONS};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::nn::{Architecture, DEFAULT_MLP_HIDDEN};
use crate::training::{Mechanism, Sampling, TrainingConfig, VmfScope};

pub const DEFAULT_ATTACK_IMAGES: usize = 10;
pub const MAX_ATTACK_IMAGES: usize = 50;

fn default_hidden() -> usize {
    DEFAULT_MLP_HIDDEN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
    LenetSmall,
}

impl ModelSpec {
    pub fn architecture(&self, shape: (usize, usize, usize), classes: usize) -> Architecture {
        let (h, w, c) = shape;
        match *self {
            ModelSpec::Mlp { hidden } => Architecture::mlp(h, w, c, hidden, classes),
            ModelSpec::LenetSmall => Architecture::lenet_small(h, w, c, classes),
        }
    }
}

fn default_clip() -> f64 {
    1.0
}

/// Training hyperparameters shared by every cell; the mechanism and seed
/// come from the cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub expected_batch: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub vmf_scope: VmfScope,
}

impl TrainingSettings {
    pub fn for_cell(&self, mechanism: Mechanism, seed: u64) -> TrainingConfig {
        TrainingConfig {
            mechanism,
            clip_norm: self.clip_norm,
            expected_batch: self.expected_batch,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed,
            sampling: self.sampling,
            vmf_scope: self.vmf_scope,
        }
    }
}

fn default_iterations() -> usize {
    DEFAULT_ITERATIONS
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA_TV
}

/// An attack without a seed; the harness derives one per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub method: AttackMethod,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha_tv: f64,
    #[serde(default)]
    pub hvp_mode: HvpMode,
    #[serde(default)]
    pub init: AttackInit,
}

impl AttackSpec {
    pub fn with_seed(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            method: self.method,
            iterations: self.iterations,
            eta: self.eta,
            alpha_tv: self.alpha_tv,
            hvp_mode: self.hvp_mode,
            init: self.init,
            seed,
        }
    }
}

fn default_images() -> usize {
    DEFAULT_ATTACK_IMAGES
}

fn default_replicates() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_mechanisms() -> Vec<Mechanism> {
    vec![Mechanism::None]
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

/// One experiment: every mechanism in `mechanisms` is trained and attacked
/// once per replicate seed `seed, seed + 1, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Base seed; must be set, usually from the command line.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub training: TrainingSettings,
    #[serde(default = "default_mechanisms")]
    pub mechanisms: Vec<Mechanism>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    /// Training images attacked per setting, taken from the front of the set.
    #[serde(default = "default_images")]
    pub attack_images: usize,
    /// Also attack the trained parameters, not only the initial ones.
    #[serde(default = "default_true")]
    pub attack_trained: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file; relative dataset and output paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = cfg.dataset.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn base_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("no seed given; pass --seed".into()))
    }

    pub fn replicate_seeds(&self) -> Result<Vec<u64>> {
        let base = self.base_seed()?;
        Ok((0..self.replicates as u64).map(|r| base.wrapping_add(r)).collect())
    }

    /// Checks everything except the dataset files.
    pub fn validate_settings(&self) -> Result<()> {
        self.base_seed()?;
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.mechanisms.is_empty() {
            return Err(Error::Config("at least one mechanism is required".into()));
        }
        if !(1..=MAX_ATTACK_IMAGES).contains(&self.attack_images) {
            return Err(Error::Config(format!(
                "attack_images must be in 1..={MAX_ATTACK_IMAGES}, got {}",
                self.attack_images
            )));
        }
        if let ModelSpec::Mlp { hidden: 0 } = self.model {
            return Err(Error::Config("mlp hidden width must be positive".into()));
        }
        for m in &self.mechanisms {
            self.training.for_cell(*m, 0).validate()?;
        }
        for a in &self.attacks {
            a.with_seed(0).validate()?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_settings()?;
        self.dataset.validate()
    }

    /// Hex SHA-256 of the config's canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
