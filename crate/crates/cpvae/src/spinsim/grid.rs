use super::hamiltonian::{HamiltonianSpec, SpinModel};
use super::lanczos::lanczos_ground_state;
use super::sampling::sample_configurations;
use super::SpinConfiguration;
use crate::{Error, Result};

/// One phase-space point and its measurement samples.
#[derive(Debug, Clone)]
pub struct GridPoint {
    pub axis1: f64,
    pub axis2: f64,
    pub samples: Vec<SpinConfiguration>,
}

/// Samples over a regular 2-D parameter grid.
///
/// Axis meaning by model: NNN-TFIM sweeps (axis1 = j2, axis2 = h), LR-TFIM
/// sweeps (axis1 = alpha, axis2 = h). Records are stored row-major with
/// axis1 outermost.
#[derive(Debug, Clone)]
pub struct GridDataset {
    pub template: HamiltonianSpec,
    pub axis1_values: Vec<f64>,
    pub axis2_values: Vec<f64>,
    pub samples_per_point: usize,
    pub seed: u64,
    pub records: Vec<GridPoint>,
}

impl GridDataset {
    pub fn n_sites(&self) -> usize {
        self.template.n_sites
    }

    pub fn axis_names(&self) -> (&'static str, &'static str) {
        match self.template.model {
            SpinModel::NnnTfim => ("j2", "h"),
            SpinModel::LrTfim => ("alpha", "h"),
        }
    }

    pub fn spec_at(&self, axis1: f64, axis2: f64) -> HamiltonianSpec {
        spec_at(&self.template, axis1, axis2)
    }

    /// Total number of stored configurations.
    pub fn total_samples(&self) -> usize {
        self.records.iter().map(|r| r.samples.len()).sum()
    }

    /// Keeps only grid points for which `keep(axis1, axis2)` is true.
    pub fn filtered(&self, keep: impl Fn(f64, f64) -> bool) -> GridDataset {
        GridDataset {
            template: self.template,
            axis1_values: self.axis1_values.clone(),
            axis2_values: self.axis2_values.clone(),
            samples_per_point: self.samples_per_point,
            seed: self.seed,
            records: self
                .records
                .iter()
                .filter(|r| keep(r.axis1, r.axis2))
                .cloned()
                .collect(),
        }
    }
}

fn spec_at(template: &HamiltonianSpec, axis1: f64, axis2: f64) -> HamiltonianSpec {
    let mut spec = *template;
    match template.model {
        SpinModel::NnnTfim => {
            spec.j2 = Some(axis1);
            spec.h = axis2;
        }
        SpinModel::LrTfim => {
            spec.alpha = Some(axis1);
            spec.h = axis2;
        }
    }
    spec
}

/// Per-point seed splitting rule: SplitMix64 of the base seed offset by the
/// record's row-major index. Documented so datasets are reproducible across
/// implementations of the concurrency model.
pub fn derive_point_seed(base_seed: u64, point_index: usize) -> u64 {
    let mut z = base_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(point_index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Solves the ground state at every grid point and draws exact samples.
///
/// Each point is a pure function of (spec, derived seed); failures carry the
/// offending grid coordinates.
pub fn generate_grid_dataset(
    template: &HamiltonianSpec,
    axis1_values: &[f64],
    axis2_values: &[f64],
    samples_per_point: usize,
    seed: u64,
    tol: f64,
    max_iter: usize,
) -> Result<GridDataset> {
    if axis1_values.is_empty() || axis2_values.is_empty() {
        return Err(Error::invalid("grid axes must be non-empty"));
    }
    if samples_per_point == 0 {
        return Err(Error::invalid("samples_per_point must be >= 1"));
    }
    let mut records = Vec::with_capacity(axis1_values.len() * axis2_values.len());
    for (i1, &a1) in axis1_values.iter().enumerate() {
        for (i2, &a2) in axis2_values.iter().enumerate() {
            let spec = spec_at(template, a1, a2);
            let point_seed = derive_point_seed(seed, i1 * axis2_values.len() + i2);
            let point = (|| -> Result<GridPoint> {
                let state = lanczos_ground_state(&spec, tol, max_iter, point_seed)?;
                let samples = sample_configurations(&state, samples_per_point, point_seed ^ 0x5EED)?;
                Ok(GridPoint {
                    axis1: a1,
                    axis2: a2,
                    samples,
                })
            })()
            .map_err(|e| Error::GridPointFailure {
                axis1: a1,
                axis2: a2,
                source: Box::new(e),
            })?;
            records.push(point);
        }
    }
    Ok(GridDataset {
        template: *template,
        axis1_values: axis1_values.to_vec(),
        axis2_values: axis2_values.to_vec(),
        samples_per_point,
        seed,
        records,
    })
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > 0.0);
    linspace(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}
