//! Experiment orchestration: train every (mechanism, seed) cell, attack the
//! initial and trained parameters, score, and persist self-contained records.

mod config;
mod report;

pub use config::{AttackSpec, ExperimentConfig, ModelSpec, TrainingSettings, DEFAULT_ATTACK_IMAGES, MAX_ATTACK_IMAGES};
pub use report::{
    emit_report, format_real, pgm_channel_bytes, pgm_strip_bytes, write_pgm_strip, ReportFiles, ACCURACY_CSV, ATTACKS_CSV,
    STRIPS_DIR,
};

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_example, AttackMethod};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{summarize, MetricSummary};
use crate::nn::{Architecture, NetworkParams};
use crate::rng::RngStream;
use crate::tensor::ImageTensor;
use crate::training::{train_from, EpochRecord, Mechanism, TrainingStreams, TrainingTrace};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const TRACES_DIR: &str = "traces";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    /// The seeded initialisation, before any training.
    Dummy,
    Trained,
}

impl Weights {
    pub fn name(&self) -> &'static str {
        match self {
            Weights::Dummy => "dummy",
            Weights::Trained => "trained",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    /// Position in the training set.
    pub index: usize,
    pub label: usize,
    pub attack_seed: u64,
    pub ssim: f64,
    pub mse: f64,
    pub best_iteration: usize,
    pub best_loss: f64,
    pub diverged: bool,
    pub ground_truth: ImageTensor,
    pub reconstructed: ImageTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    /// Index into the config's attack list.
    pub attack: usize,
    pub method: AttackMethod,
    pub weights: Weights,
    pub summary: MetricSummary,
    pub images: Vec<ImageOutcome>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub train_seconds: f64,
    pub attack_seconds: f64,
}

/// Everything one (mechanism, seed) cell produced, with the config that
/// produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub architecture: Architecture,
    pub mechanism: Mechanism,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
    pub attacks: Vec<AttackOutcome>,
    /// Wall-clock only; excluded from [`ResultsRecord::numeric_json`].
    pub timings: Timings,
}

impl ResultsRecord {
    pub fn model(&self) -> &'static str {
        self.architecture.tag()
    }

    /// JSON of every field except timings; identical for identical inputs.
    pub fn numeric_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.timings = Timings::default();
        Ok(serde_json::to_string(&r)?)
    }
}

/// One cell's output before persistence.
pub struct CellRun {
    pub record: ResultsRecord,
    pub trace: TrainingTrace,
}

/// Seed of the attack on image `image` with attack `attack` in a cell.
pub fn attack_seed(cell_seed: u64, attack: usize, weights: Weights, image: usize) -> u64 {
    let w = match weights {
        Weights::Dummy => 0,
        Weights::Trained => 1,
    };
    RngStream::new(cell_seed).child(1_000 + 2 * attack as u64 + w).child(image as u64).rng().next_u64()
}

fn attack_all(
    cfg: &ExperimentConfig,
    data: &Dataset,
    params: &NetworkParams,
    mechanism: &Mechanism,
    seed: u64,
    weights: Weights,
) -> Result<Vec<AttackOutcome>> {
    let n = cfg.attack_images.min(data.train.len());
    cfg.attacks
        .iter()
        .enumerate()
        .map(|(a, spec)| {
            let images = (0..n)
                .into_par_iter()
                .map(|i| {
                    let ex = &data.train[i];
                    let s = attack_seed(seed, a, weights, i);
                    let report = attack_example(params, ex, mechanism, &spec.with_seed(s))?;
                    Ok(ImageOutcome {
                        index: i,
                        label: ex.y,
                        attack_seed: s,
                        ssim: report.final_ssim,
                        mse: report.final_mse,
                        best_iteration: report.best_iteration,
                        best_loss: report.best_loss,
                        diverged: report.diverged,
                        ground_truth: ex.x.clone(),
                        reconstructed: report.reconstructed,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let pairs: Vec<(f64, f64)> = images.iter().map(|o| (o.ssim, o.mse)).collect();
            Ok(AttackOutcome { attack: a, method: spec.method, weights, summary: summarize(&pairs)?, images })
        })
        .collect()
}

/// Trains and attacks one cell on an already loaded dataset.
pub fn run_cell_on(cfg: &ExperimentConfig, data: &Dataset, mechanism: Mechanism, seed: u64) -> Result<CellRun> {
    let arch = cfg.model.architecture(data.shape(), cfg.dataset.classes());
    let tcfg = cfg.training.for_cell(mechanism, seed);
    let initial = NetworkParams::init(arch, TrainingStreams::new(seed).init())?;

    let clock = Instant::now();
    let (trained, trace) = train_from(initial.clone(), &data.train, &data.test, &tcfg)?;
    let train_seconds = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let mut attacks = attack_all(cfg, data, &initial, &mechanism, seed, Weights::Dummy)?;
    if cfg.attack_trained {
        attacks.extend(attack_all(cfg, data, &trained, &mechanism, seed, Weights::Trained)?);
    }
    let attack_seconds = clock.elapsed().as_secs_f64();

    let record = ResultsRecord {
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        architecture: arch,
        mechanism,
        seed,
        final_accuracy: trace.final_accuracy().expect("at least one epoch"),
        epochs: trace.epochs.clone(),
        attacks,
        timings: Timings { train_seconds, attack_seconds },
    };
    Ok(CellRun { record, trace })
}

/// Loads the dataset and runs one cell.
pub fn run_cell(cfg: &ExperimentConfig, mechanism: Mechanism, seed: u64) -> Result<CellRun> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    run_cell_on(cfg, &data, mechanism, seed)
}

/// Runs every cell without touching the file system.
pub fn run_cells(cfg: &ExperimentConfig) -> Result<Vec<CellRun>> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let seeds = cfg.replicate_seeds()?;
    let cells: Vec<(Mechanism, u64)> =
        cfg.mechanisms.iter().flat_map(|m| seeds.iter().map(move |s| (*m, *s))).collect();
    cells.into_par_iter().map(|(m, s)| run_cell_on(cfg, &data, m, s)).collect()
}

/// Runs every cell, appends one line per cell to `results.jsonl` in the
/// output directory and writes each cell's training trace.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ResultsRecord>> {
    let runs = run_cells(cfg)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out.join(TRACES_DIR)).map_err(|e| Error::io(out, e))?;
    for run in &runs {
        let r = &run.record;
        let name = format!("{}_{}_seed{}.jsonl", r.model(), cell_label(&r.mechanism), r.seed);
        write_atomically(&out.join(TRACES_DIR).join(name), run.trace.to_jsonl()?.as_bytes())?;
        append_record(&out.join(RESULTS_FILE), r)?;
    }
    Ok(runs.into_iter().map(|r| r.record).collect())
}

/// `none`, `gaussian-1`, `vmf-300000`: a file-name friendly cell label.
pub fn cell_label(m: &Mechanism) -> String {
    match m.parameter() {
        None => m.name().to_string(),
        Some(p) => format!("{}-{}", m.name(), p),
    }
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Appends a record as a single JSON line with one write.
pub fn append_record(path: &Path, record: &ResultsRecord) -> Result<()> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ResultsRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub matches: bool,
    /// First differing top-level field, when there is one.
    pub first_difference: Option<String>,
}

fn first_difference(a: &ResultsRecord, b: &ResultsRecord) -> Result<Option<String>> {
    let (serde_json::Value::Object(x), serde_json::Value::Object(y)) =
        (serde_json::to_value(a)?, serde_json::to_value(b)?)
    else {
        unreachable!("records serialise to objects")
    };
    Ok(x.iter().find(|(k, v)| *k != "timings" && y.get(*k) != Some(v)).map(|(k, _)| k.clone()))
}

/// Re-runs every record from its embedded config and compares all
/// non-timing fields.
pub fn verify_records(records: &[ResultsRecord]) -> Result<Vec<VerifyOutcome>> {
    records
        .iter()
        .map(|r| {
            if r.config.hash()? != r.config_hash {
                return Err(Error::data(PathBuf::from(RESULTS_FILE), "embedded config does not match its hash"));
            }
            let again = run_cell(&r.config, r.mechanism, r.seed)?.record;
            let matches = again.numeric_json()? == r.numeric_json()?;
            Ok(VerifyOutcome {
                mechanism: r.mechanism,
                seed: r.seed,
                matches,
                first_difference: if matches { None } else { first_difference(r, &again)? },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
