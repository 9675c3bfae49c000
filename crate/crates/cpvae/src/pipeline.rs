//! Run-level plumbing: desk-scale experiment presets, holdout experiments,
//! Rydberg snapshot ingestion, run manifests and atomic file output.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{
    map_mean_absolute_error, reconstruction_map, Observable, PhaseMap, SnapshotSet2D,
};
use crate::models::VaeModel;
use crate::objective::LossWeights;
use crate::spinsim::{linspace, logspace, GridDataset, HamiltonianSpec};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Sidecar describing how an artifact was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: serde_json::Value, seed: u64) -> Self {
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            command: command.into(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// Writes via a temp file in the same directory plus rename, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loss-weight presets pinned to the published hyperparameter table.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightPreset {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
}

pub fn weight_preset(name: &str) -> Result<WeightPreset> {
    match name {
        "nnn" => Ok(WeightPreset { alpha: 0.1, beta: 30.0, gamma_min: 0.1, gamma_max: 0.2 }),
        "lr" => Ok(WeightPreset { alpha: 0.1, beta: 0.5, gamma_min: 0.5, gamma_max: 10.0 }),
        "rydberg" => Ok(WeightPreset { alpha: 0.001, beta: 10.0, gamma_min: 1.0, gamma_max: 1.0 }),
        other => Err(Error::invalid(format!(
            "unknown weight preset '{}'; valid presets: nnn, lr, rydberg",
            other
        ))),
    }
}

impl WeightPreset {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma_min }
    }
}

/// Desk-scale NNN-TFIM grid: N = 10, 11 j2 values in [0, 1] x 21 h values
/// in [0, 2].
pub fn nnn_desk_axes() -> (Vec<f64>, Vec<f64>) {
    (linspace(0.0, 1.0, 11), linspace(0.0, 2.0, 21))
}

/// Desk-scale LR-TFIM grid: N = 10, 10 alpha values linear in [1, 5] x
/// 10 h values log-spaced in [1.6, 10].
pub fn lr_desk_axes() -> (Vec<f64>, Vec<f64>) {
    (linspace(1.0, 5.0, 10), logspace(1.6, 10.0, 10))
}

pub fn nnn_desk_template(n_sites: usize) -> HamiltonianSpec {
    HamiltonianSpec::nnn(n_sites, 0.0, 0.0)
}

pub fn lr_desk_template(n_sites: usize) -> HamiltonianSpec {
    HamiltonianSpec::lr(n_sites, 1.0, 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutAxis {
    Axis1,
    Axis2,
}

/// Excluded-interval holdout: grid points with the chosen axis strictly
/// inside (lo, hi) are removed from training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HoldoutSpec {
    pub axis: HoldoutAxis,
    pub lo: f64,
    pub hi: f64,
}

impl HoldoutSpec {
    /// The published protocol's band on the transverse-field axis.
    pub fn h_band() -> Self {
        Self { axis: HoldoutAxis::Axis2, lo: 0.4, hi: 0.75 }
    }

    pub fn validate(&self, dataset: &GridDataset) -> Result<()> {
        if !(self.lo < self.hi) {
            return Err(Error::invalid("holdout interval needs lo < hi"));
        }
        let axis = match self.axis {
            HoldoutAxis::Axis1 => &dataset.axis1_values,
            HoldoutAxis::Axis2 => &dataset.axis2_values,
        };
        let min = axis.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = axis.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if self.hi <= min || self.lo >= max {
            return Err(Error::invalid(format!(
                "holdout band ({}, {}) lies outside the axis range [{}, {}]",
                self.lo, self.hi, min, max
            )));
        }
        if axis.iter().all(|&v| self.excludes(v)) {
            return Err(Error::invalid("holdout band excludes every grid point"));
        }
        Ok(())
    }

    pub fn excludes(&self, value: f64) -> bool {
        value > self.lo && value < self.hi
    }

    pub fn excludes_point(&self, axis1: f64, axis2: f64) -> bool {
        match self.axis {
            HoldoutAxis::Axis1 => self.excludes(axis1),
            HoldoutAxis::Axis2 => self.excludes(axis2),
        }
    }
}

/// Held-out vs. in-band generalization summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub held_out_mean_error: f64,
    pub in_band_mean_error: f64,
    pub error_ratio: f64,
}

/// Trains on the band-filtered dataset, then compares per-cell absolute
/// reconstruction-map errors inside and outside the excluded band. The maps
/// evaluate on the full dataset so held-out points are genuinely unseen.
pub fn run_holdout(
    model: &mut VaeModel,
    dataset: &GridDataset,
    holdout: &HoldoutSpec,
    train_config: &TrainConfig,
    observable: Observable,
    eval_seed: u64,
) -> Result<(HoldoutReport, PhaseMap, PhaseMap)> {
    holdout.validate(dataset)?;
    let training = dataset.filtered(|a1, a2| !holdout.excludes_point(a1, a2));
    crate::trainer::train(model, &training, train_config)?;

    let data_map = crate::analysis::data_phase_map(dataset, observable, "data")?;
    let model_map = reconstruction_map(model, dataset, observable, eval_seed, "generated")?;
    let mut held = (0.0, 0usize);
    let mut in_band = (0.0, 0usize);
    for (cell, record) in dataset.records.iter().enumerate() {
        let err = (data_map.cells[cell] - model_map.cells[cell]).abs();
        if holdout.excludes_point(record.axis1, record.axis2) {
            held.0 += err;
            held.1 += 1;
        } else {
            in_band.0 += err;
            in_band.1 += 1;
        }
    }
    if held.1 == 0 || in_band.1 == 0 {
        return Err(Error::invalid("holdout band must split the grid into two non-empty regions"));
    }
    let held_out_mean_error = held.0 / held.1 as f64;
    let in_band_mean_error = in_band.0 / in_band.1 as f64;
    let report = HoldoutReport {
        held_out_mean_error,
        in_band_mean_error,
        error_ratio: held_out_mean_error / in_band_mean_error.max(1e-12),
    };
    debug_assert!(map_mean_absolute_error(&data_map, &model_map).is_ok());
    Ok((report, data_map, model_map))
}

/// Saves model weights plus its configuration in the checkpoint container.
pub fn save_model(model: &VaeModel, path: &Path) -> Result<()> {
    let meta = serde_json::json!({ "model_config": model.config });
    let params = model.params();
    let refs: Vec<(String, &crate::autodiff::Tensor)> = params;
    crate::autodiff::write_checkpoint(path, meta, &refs)
}

/// Restores a model from a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<VaeModel> {
    let (meta, params) = crate::autodiff::read_checkpoint(path)?;
    let config: crate::models::ModelConfig = serde_json::from_value(
        meta.get("model_config")
            .cloned()
            .ok_or_else(|| Error::invalid("checkpoint is missing model_config metadata"))?,
    )?;
    let mut model = VaeModel::new(config, 0)?;
    let expected: Vec<String> = model.params().iter().map(|(n, _)| n.clone()).collect();
    let got: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    if expected != got {
        return Err(Error::invalid("checkpoint parameter names do not match the model"));
    }
    model.set_params(&params.into_iter().map(|(_, t)| t).collect::<Vec<_>>())?;
    Ok(model)
}

#[derive(Debug, Deserialize)]
struct RawSnapshot {
    rb_over_a: f64,
    delta_over_omega: f64,
    bits: String,
}

/// Ingestion summary: grouped snapshot sets plus malformed-record counts.
#[derive(Debug)]
pub struct IngestReport {
    pub sets: Vec<SnapshotSet2D>,
    pub accepted: usize,
    pub rejected: usize,
    pub rejection_lines: Vec<usize>,
}

/// Reads newline-delimited JSON records
/// {"rb_over_a": f, "delta_over_omega": f, "bits": "0101..."} and groups
/// them by control-parameter pair. Records with the wrong bit length are
/// rejected and counted, not fatal (strict handling is the caller's call).
pub fn ingest_snapshots(path: &Path, lattice_shape: (usize, usize)) -> Result<IngestReport> {
    let n = lattice_shape.0 * lattice_shape.1;
    if n == 0 {
        return Err(Error::invalid("lattice shape must be non-degenerate"));
    }
    let file = fs::File::open(path)?;
    let mut sets: Vec<SnapshotSet2D> = Vec::new();
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut rejection_lines = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSnapshot = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                return Err(Error::MalformedRecord {
                    line: line_no + 1,
                    message: e.to_string(),
                })
            }
        };
        if raw.bits.len() != n || raw.bits.bytes().any(|b| b != b'0' && b != b'1') {
            rejected += 1;
            rejection_lines.push(line_no + 1);
            continue;
        }
        let occupation: Vec<u8> = raw.bits.bytes().map(|b| b - b'0').collect();
        match sets.iter_mut().find(|s| {
            s.rb_over_a == raw.rb_over_a && s.delta_over_omega == raw.delta_over_omega
        }) {
            Some(set) => set.occupations.push(occupation),
            None => sets.push(SnapshotSet2D {
                lattice_shape,
                occupations: vec![occupation],
                rb_over_a: raw.rb_over_a,
                delta_over_omega: raw.delta_over_omega,
            }),
        }
        accepted += 1;
    }
    Ok(IngestReport { sets, accepted, rejected, rejection_lines })
}

/// Snapshots flattened row-major to +/-1 chains for the 1-D model stack
/// (0 -> -1, 1 -> +1).
pub fn snapshots_to_configurations(
    set: &SnapshotSet2D,
) -> Result<Vec<crate::spinsim::SpinConfiguration>> {
    set.validate()?;
    set.occupations
        .iter()
        .map(|snap| {
            crate::spinsim::SpinConfiguration::new(
                snap.iter().map(|&b| if b == 1 { 1 } else { -1 }).collect(),
            )
        })
        .collect()
}
