//! CSV tables and PGM image strips.
//!
//! Reals are written as `{:.16e}` (17 significant digits), which parses back
//! to the identical `f64`. Empty fields mean "not applicable".
//!
//! `accuracy.csv`: one row per (model, mechanism, parameter) with the mean
//! over all records of the final test accuracy and of each top-k accuracy.
//!
//! `attacks.csv`: one row per (model, mechanism, parameter, attack, weights)
//! with the mean SSIM and median MSE pooled over every attacked image.
//!
//! `strips/`: one binary PGM per image and attack setting, taken from the
//! record with the lowest seed. Each strip is the ground truth, a one pixel
//! white gap, then the reconstruction; channels are stacked vertically.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{cell_label, write_atomically, ResultsRecord};
use crate::error::{Error, Result};
use crate::metrics::summarize;
use crate::tensor::ImageTensor;

pub const ACCURACY_CSV: &str = "accuracy.csv";
pub const ATTACKS_CSV: &str = "attacks.csv";
pub const STRIPS_DIR: &str = "strips";

pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn format_opt(v: Option<f64>) -> String {
    v.map(format_real).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub accuracy_csv: PathBuf,
    pub attacks_csv: PathBuf,
    pub strips: Vec<PathBuf>,
}

/// Maps a pixel to a byte: clamp to `[0, 1]`, scale by 255, round. NaN maps to 0.
fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// `P5` header then `2w + 1` by `h * c` bytes.
pub fn pgm_strip_bytes(truth: &ImageTensor, recon: &ImageTensor) -> Result<Vec<u8>> {
    if !truth.same_shape(recon) {
        return Err(Error::ShapeMismatch(format!("strip of {:?} and {:?}", truth.shape(), recon.shape())));
    }
    let (h, w, c) = truth.shape();
    let width = 2 * w + 1;
    let mut out = format!("P5\n{width} {}\n255\n", h * c).into_bytes();
    for ch in 0..c {
        for y in 0..h {
            out.extend((0..w).map(|x| to_byte(truth.get(y, x, ch))));
            out.push(255);
            out.extend((0..w).map(|x| to_byte(recon.get(y, x, ch))));
        }
    }
    Ok(out)
}

/// A single channel as a `w` by `h` PGM.
pub fn pgm_channel_bytes(img: &ImageTensor, channel: usize) -> Result<Vec<u8>> {
    let (h, w, c) = img.shape();
    if channel >= c {
        return Err(Error::InvalidParameter(format!("channel {channel} of a {c}-channel image")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.channel(channel).into_iter().map(to_byte));
    Ok(out)
}

pub fn write_pgm_strip(path: &Path, truth: &ImageTensor, recon: &ImageTensor) -> Result<()> {
    write_atomically(path, &pgm_strip_bytes(truth, recon)?)
}

type CellKey = (String, String, String);

fn cell_key(r: &ResultsRecord) -> CellKey {
    (r.model().to_string(), r.mechanism.name().to_string(), format_opt(r.mechanism.parameter()))
}

/// Order cells by model, mechanism name, then numeric parameter.
fn sort_key(r: &ResultsRecord) -> (String, String, u64) {
    let p = r.mechanism.parameter().map_or(0, |p| p.to_bits());
    (r.model().to_string(), r.mechanism.name().to_string(), p)
}

fn finish(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomically(path, &bytes)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Writes `accuracy.csv`, `attacks.csv` and the PGM strips under `dir`.
pub fn emit_report(records: &[ResultsRecord], dir: &Path) -> Result<ReportFiles> {
    if records.is_empty() {
        return Err(Error::Empty("results records"));
    }
    let strips_dir = dir.join(STRIPS_DIR);
    fs::create_dir_all(&strips_dir).map_err(|e| Error::io(&strips_dir, e))?;

    let mut sorted: Vec<&ResultsRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (sort_key(r), r.seed));

    let mut cells: BTreeMap<(String, String, u64), (CellKey, Vec<&ResultsRecord>)> = BTreeMap::new();
    for r in &sorted {
        cells.entry(sort_key(r)).or_insert_with(|| (cell_key(r), Vec::new())).1.push(r);
    }

    let accuracy_csv = dir.join(ACCURACY_CSV);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "mechanism", "parameter", "records", "mean_accuracy", "top_1", "top_5", "top_10"])?;
    for ((model, mech, param), rs) in cells.values() {
        let acc: Vec<f64> = rs.iter().map(|r| r.final_accuracy).collect();
        let top = |k: usize| -> Option<f64> {
            let v: Vec<f64> = rs
                .iter()
                .filter_map(|r| r.epochs.last()?.top_k.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a))
                .collect();
            (v.len() == rs.len()).then(|| mean(&v))
        };
        w.write_record([
            model.clone(),
            mech.clone(),
            param.clone(),
            rs.len().to_string(),
            format_real(mean(&acc)),
            format_opt(top(1)),
            format_opt(top(5)),
            format_opt(top(10)),
        ])?;
    }
    finish(&accuracy_csv, w)?;

    let attacks_csv = dir.join(ATTACKS_CSV);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "mechanism", "parameter", "attack", "method", "weights", "images", "mean_ssim", "median_mse"])?;
    let mut strips = Vec::new();
    for ((model, mech, param), rs) in cells.values() {
        let mut settings: BTreeMap<(usize, &str), Vec<&super::AttackOutcome>> = BTreeMap::new();
        for r in rs {
            for a in &r.attacks {
                settings.entry((a.attack, a.weights.name())).or_default().push(a);
            }
        }
        for ((attack, weights), outcomes) in &settings {
            let pooled: Vec<(f64, f64)> = outcomes.iter().flat_map(|o| o.summary.per_image.iter().copied()).collect();
            let s = summarize(&pooled)?;
            let first = outcomes[0];
            w.write_record([
                model.clone(),
                mech.clone(),
                param.clone(),
                attack.to_string(),
                first.method.name().to_string(),
                weights.to_string(),
                pooled.len().to_string(),
                format_real(s.mean_ssim),
                format_real(s.median_mse),
            ])?;
            let label = cell_label(&rs[0].mechanism);
            for img in &first.images {
                let name = format!(
                    "{model}_{label}_attack{attack}-{}_{weights}_img{:03}.pgm",
                    first.method.name(),
                    img.index
                );
                let path = strips_dir.join(name);
                write_pgm_strip(&path, &img.ground_truth, &img.reconstructed)?;
                strips.push(path);
            }
        }
    }
    finish(&attacks_csv, w)?;
    Ok(ReportFiles { accuracy_csv, attacks_csv, strips })
}
