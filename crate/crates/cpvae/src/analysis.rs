//! Observables and latent-space analyses: magnetization, correlators,
//! power-law exponent fits, structure factor, 2-D Fourier order parameters,
//! edge/bulk differences, spectral entropy, latent maps, latent sweeps and
//! reconstruction maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::models::{batch_to_tensor, VaeModel, Variant};
use crate::spinsim::{Boundary, GridDataset, SpinConfiguration};
use crate::{Error, Result};

/// One real value per grid point, plot-ready.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseMap {
    pub axis1_values: Vec<f64>,
    pub axis2_values: Vec<f64>,
    /// Row-major over (axis1, axis2).
    pub cells: Vec<f64>,
    pub label: String,
}

impl PhaseMap {
    pub fn new(axis1_values: Vec<f64>, axis2_values: Vec<f64>, cells: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if cells.len() != axis1_values.len() * axis2_values.len() {
            return Err(Error::shape(
                format!("{} cells", axis1_values.len() * axis2_values.len()),
                format!("{}", cells.len()),
            ));
        }
        Ok(Self { axis1_values, axis2_values, cells, label: label.into() })
    }

    pub fn value_at(&self, i1: usize, i2: usize) -> f64 {
        self.cells[i1 * self.axis2_values.len() + i2]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis1,axis2,value,label\n");
        for (i1, a1) in self.axis1_values.iter().enumerate() {
            for (i2, a2) in self.axis2_values.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", a1, a2, self.value_at(i1, i2), self.label));
            }
        }
        out
    }
}

/// Binary occupation snapshots on an L1 x L2 lattice (row-major sites).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotSet2D {
    pub lattice_shape: (usize, usize),
    /// Each snapshot is a length L1*L2 sequence over {0, 1}.
    pub occupations: Vec<Vec<u8>>,
    pub rb_over_a: f64,
    pub delta_over_omega: f64,
}

impl SnapshotSet2D {
    pub fn validate(&self) -> Result<()> {
        let n = self.lattice_shape.0 * self.lattice_shape.1;
        for snap in &self.occupations {
            if snap.len() != n {
                return Err(Error::shape(format!("{} sites", n), format!("{}", snap.len())));
            }
            if snap.iter().any(|&b| b > 1) {
                return Err(Error::invalid("occupation entries must be 0 or 1"));
            }
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.lattice_shape.0 * self.lattice_shape.1
    }
}

/// Mean per-shot magnetization (1/N) sum_i x_i over the batch; with
/// `absolute`, the per-shot absolute value is averaged (the phase-map
/// default, which resolves the Z2 degeneracy of symmetry-broken phases).
pub fn magnetization(batch: &[SpinConfiguration], absolute: bool) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("magnetization of an empty batch"));
    }
    let mut total = 0.0;
    for cfg in batch {
        let m: f64 = (0..cfg.len()).map(|i| cfg.spin(i)).sum::<f64>() / cfg.len() as f64;
        total += if absolute { m.abs() } else { m };
    }
    Ok(total / batch.len() as f64)
}

/// Mean over samples and site pairs at separation `d` of x_i x_{i+d}.
/// Periodic data wraps; open data uses only in-range pairs.
pub fn two_point_correlator(batch: &[SpinConfiguration], d: usize, boundary: Boundary) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("correlator of an empty batch"));
    }
    let n = batch[0].len();
    if d == 0 || d >= n {
        return Err(Error::invalid(format!("distance {} out of range 1..{}", d, n)));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for cfg in batch {
        match boundary {
            Boundary::Periodic => {
                for i in 0..n {
                    total += cfg.spin(i) * cfg.spin((i + d) % n);
                    pairs += 1;
                }
            }
            Boundary::Open => {
                for i in 0..n - d {
                    total += cfg.spin(i) * cfg.spin(i + d);
                    pairs += 1;
                }
            }
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BetaFit {
    pub beta: f64,
    /// Set when the fit was impossible (too few positive correlations) or
    /// produced a negative exponent, in which case beta is reported as 0.
    pub degenerate: bool,
}

/// Least-squares fit of log C(r) = -beta log r + c over the r with C(r) > 0.
/// `correlations[k]` holds C(r = k + 1).
pub fn fit_correlation_exponent(correlations: &[f64]) -> BetaFit {
    let points: Vec<(f64, f64)> = correlations
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0.0)
        .map(|(k, &c)| (((k + 1) as f64).ln(), c.ln()))
        .collect();
    if points.len() < 3 {
        return BetaFit { beta: 0.0, degenerate: true };
    }
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return BetaFit { beta: 0.0, degenerate: true };
    }
    let slope = (n * sxy - sx * sy) / denom;
    let beta = -slope;
    if beta < -1e-9 {
        BetaFit { beta: 0.0, degenerate: true }
    } else {
        BetaFit { beta, degenerate: false }
    }
}

/// Power-law exponent of the two-point correlator C(r) ~ r^{-beta} for
/// r = 1..floor(N/2), computed from open-boundary chain data.
pub fn correlation_exponent_beta(batch: &[SpinConfiguration]) -> Result<BetaFit> {
    if batch.is_empty() {
        return Err(Error::invalid("beta fit on an empty batch"));
    }
    let n = batch[0].len();
    let rmax = n / 2;
    let mut c = Vec::with_capacity(rmax);
    for r in 1..=rmax {
        c.push(two_point_correlator(batch, r, Boundary::Open)?);
    }
    Ok(fit_correlation_exponent(&c))
}

/// S(k, i) = (1/N) sum_j cos(2 pi k |j - i| / N) <Z^j Z^i>, with the j = i
/// term contributing exactly 1.
pub fn structure_factor(batch: &[SpinConfiguration], k: f64, i: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("structure factor of an empty batch"));
    }
    let n = batch[0].len();
    if i >= n {
        return Err(Error::invalid(format!("reference site {} out of range", i)));
    }
    let mut s = 0.0;
    for j in 0..n {
        let c = if j == i {
            1.0
        } else {
            batch
                .iter()
                .map(|cfg| cfg.spin(j) * cfg.spin(i))
                .sum::<f64>()
                / batch.len() as f64
        };
        let dist = (j as f64 - i as f64).abs();
        s += (2.0 * std::f64::consts::PI * k * dist / n as f64).cos() * c;
    }
    Ok(s / n as f64)
}

/// F(k) = |(1/sqrt(N)) sum_i exp(i k . x_i) n_i| averaged over snapshots,
/// then symmetrized: (F(k1,k2) + F(k2,k1)) / 2. Wavevectors in radians per
/// lattice constant; site coordinates are integer (row, column) positions.
pub fn fourier_order_parameter(snapshots: &SnapshotSet2D, k1: f64, k2: f64) -> Result<f64> {
    snapshots.validate()?;
    if snapshots.occupations.is_empty() {
        return Err(Error::invalid("fourier order parameter of an empty snapshot set"));
    }
    Ok((fourier_amplitude(snapshots, k1, k2) + fourier_amplitude(snapshots, k2, k1)) / 2.0)
}

fn fourier_amplitude(snapshots: &SnapshotSet2D, k1: f64, k2: f64) -> f64 {
    let (l1, l2) = snapshots.lattice_shape;
    let n = (l1 * l2) as f64;
    let mut total = 0.0;
    for snap in &snapshots.occupations {
        let mut re = 0.0;
        let mut im = 0.0;
        for (s, &occ) in snap.iter().enumerate() {
            if occ == 1 {
                let x1 = (s / l2) as f64;
                let x2 = (s % l2) as f64;
                let phase = k1 * x1 + k2 * x2;
                re += phase.cos();
                im += phase.sin();
            }
        }
        total += (re * re + im * im).sqrt() / n.sqrt();
    }
    total / snapshots.occupations.len() as f64
}

/// Mean nearest-neighbor connected occupation correlator over edge bonds
/// (both endpoints on the boundary ring) minus the same over bulk bonds
/// (both endpoints interior).
pub fn edge_bulk_correlator_difference(snapshots: &SnapshotSet2D) -> Result<f64> {
    snapshots.validate()?;
    let (l1, l2) = snapshots.lattice_shape;
    if l1 < 3 || l2 < 3 {
        return Err(Error::invalid("lattice must be at least 3 x 3"));
    }
    if snapshots.occupations.is_empty() {
        return Err(Error::invalid("edge/bulk difference of an empty snapshot set"));
    }
    let on_edge = |r: usize, c: usize| r == 0 || c == 0 || r == l1 - 1 || c == l2 - 1;
    let idx = |r: usize, c: usize| r * l2 + c;
    let mut edge_bonds = Vec::new();
    let mut bulk_bonds = Vec::new();
    for r in 0..l1 {
        for c in 0..l2 {
            for (r2, c2) in [(r + 1, c), (r, c + 1)] {
                if r2 >= l1 || c2 >= l2 {
                    continue;
                }
                let bond = (idx(r, c), idx(r2, c2));
                if on_edge(r, c) && on_edge(r2, c2) {
                    edge_bonds.push(bond);
                } else if !on_edge(r, c) && !on_edge(r2, c2) {
                    bulk_bonds.push(bond);
                }
            }
        }
    }
    let connected = |bonds: &[(usize, usize)]| -> f64 {
        let m = snapshots.occupations.len() as f64;
        let mut acc = 0.0;
        for &(a, b) in bonds {
            let mut na = 0.0;
            let mut nb = 0.0;
            let mut nab = 0.0;
            for snap in &snapshots.occupations {
                na += snap[a] as f64;
                nb += snap[b] as f64;
                nab += (snap[a] * snap[b]) as f64;
            }
            acc += nab / m - (na / m) * (nb / m);
        }
        acc / bonds.len() as f64
    };
    Ok(connected(&edge_bonds) - connected(&bulk_bonds))
}

/// Shannon entropy (natural log) of the normalized DFT power spectrum of the
/// +/-1 site sequence, over all N frequency bins.
pub fn spectral_entropy(x: &SpinConfiguration) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::invalid("spectral entropy needs at least 2 sites"));
    }
    let mut power = Vec::with_capacity(n);
    for k in 0..n {
        let mut re = 0.0;
        let mut im = 0.0;
        for j in 0..n {
            let angle = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
            re += x.spin(j) * angle.cos();
            im += x.spin(j) * angle.sin();
        }
        power.push(re * re + im * im);
    }
    let total: f64 = power.iter().sum();
    let mut s = 0.0;
    for p in power {
        let ip = p / total;
        if ip > 0.0 {
            s -= ip * ip.ln();
        }
    }
    Ok(s.max(0.0))
}

/// Encoder statistics across the phase diagram: per latent dimension, maps
/// of mean mu, mean |mu| and mean sigma over each grid point's batch.
#[derive(Debug, Clone)]
pub struct LatentMaps {
    pub mu: Vec<PhaseMap>,
    pub mu_abs: Vec<PhaseMap>,
    pub sigma: Vec<PhaseMap>,
}

pub fn latent_phase_map(model: &VaeModel, dataset: &GridDataset) -> Result<LatentMaps> {
    if dataset.n_sites() != model.n_sites() {
        return Err(Error::invalid("dataset/model site count mismatch"));
    }
    let d = model.d_latent();
    let n_cells = dataset.records.len();
    let mut mu_cells = vec![vec![0.0; n_cells]; d];
    let mut abs_cells = vec![vec![0.0; n_cells]; d];
    let mut sigma_cells = vec![vec![0.0; n_cells]; d];
    for (cell, record) in dataset.records.iter().enumerate() {
        let count = record.samples.len().max(1) as f64;
        for chunk in record.samples.chunks(512) {
            let (mu, lv) = model.encode_batch(&batch_to_tensor(chunk));
            for bi in 0..chunk.len() {
                for j in 0..d {
                    let m = mu.at2(bi, j);
                    mu_cells[j][cell] += m;
                    abs_cells[j][cell] += m.abs();
                    sigma_cells[j][cell] += (0.5 * lv.at2(bi, j)).exp();
                }
            }
        }
        for j in 0..d {
            mu_cells[j][cell] /= count;
            abs_cells[j][cell] /= count;
            sigma_cells[j][cell] /= count;
        }
    }
    let build = |cells: Vec<Vec<f64>>, tag: &str| -> Result<Vec<PhaseMap>> {
        cells
            .into_iter()
            .enumerate()
            .map(|(j, c)| {
                PhaseMap::new(
                    dataset.axis1_values.clone(),
                    dataset.axis2_values.clone(),
                    c,
                    format!("{}_{}", tag, j),
                )
            })
            .collect()
    };
    Ok(LatentMaps {
        mu: build(mu_cells, "mu")?,
        mu_abs: build(abs_cells, "mu_abs")?,
        sigma: build(sigma_cells, "sigma")?,
    })
}

/// One latent-sweep point: observables of configurations generated at a
/// fixed latent value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRecord {
    pub dimension: usize,
    pub z_value: f64,
    pub magnetization: f64,
    pub beta: f64,
    pub nn_correlator: f64,
    pub degenerate_fit: bool,
}

pub fn sweep_records_to_csv(records: &[SweepRecord]) -> String {
    let mut out = String::from("dimension,z_value,magnetization,beta,nn_correlator\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.dimension, r.z_value, r.magnetization, r.beta, r.nn_correlator
        ));
    }
    out
}

/// Scan one latent dimension (all others held at 0), generating `count`
/// configurations per value and summarizing their observables. Returns the
/// sweep records plus a warning flag set when the swept dimension is
/// passive.
pub fn latent_sweep_generate(
    model: &VaeModel,
    dimension: usize,
    values: &[f64],
    count: usize,
    seed: u64,
    active_dimensions: &[usize],
) -> Result<(Vec<SweepRecord>, bool)> {
    if dimension >= model.d_latent() {
        return Err(Error::invalid(format!("latent dimension {} out of range", dimension)));
    }
    if count == 0 || values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value and one sample"));
    }
    let passive_warning = !active_dimensions.contains(&dimension);
    let mut records = Vec::with_capacity(values.len());
    for (vi, &value) in values.iter().enumerate() {
        let mut z = vec![0.0; model.d_latent()];
        z[dimension] = value;
        let sample_seed = seed.wrapping_add(vi as u64).wrapping_mul(0x9E3779B97F4A7C15);
        let batch = model.autoregressive_sample(
            &crate::models::LatentSample::from_z(z),
            count,
            sample_seed,
        )?;
        let fit = correlation_exponent_beta(&batch)?;
        records.push(SweepRecord {
            dimension,
            z_value: value,
            magnetization: magnetization(&batch, false)?,
            beta: fit.beta,
            nn_correlator: two_point_correlator(&batch, 1, Boundary::Open)?,
            degenerate_fit: fit.degenerate,
        });
    }
    Ok((records, passive_warning))
}

/// Named observable evaluated on a batch for phase/reconstruction maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observable {
    Magnetization { absolute: bool },
    Correlator { distance: usize },
    Beta,
    StructureFactor { k: f64, site: usize },
}

impl Observable {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "magnetization" => Ok(Self::Magnetization { absolute: true }),
            "signed_magnetization" => Ok(Self::Magnetization { absolute: false }),
            "nn_correlator" => Ok(Self::Correlator { distance: 1 }),
            "nnn_correlator" => Ok(Self::Correlator { distance: 2 }),
            "beta" => Ok(Self::Beta),
            "structure_factor" => Ok(Self::StructureFactor { k: 0.8, site: 0 }),
            other => Err(Error::invalid(format!(
                "unknown observable '{}'; valid names: magnetization, signed_magnetization, \
                 nn_correlator, nnn_correlator, beta, structure_factor",
                other
            ))),
        }
    }

    pub fn evaluate(&self, batch: &[SpinConfiguration], boundary: Boundary) -> Result<f64> {
        match *self {
            Self::Magnetization { absolute } => magnetization(batch, absolute),
            Self::Correlator { distance } => two_point_correlator(batch, distance, boundary),
            Self::Beta => Ok(correlation_exponent_beta(batch)?.beta),
            Self::StructureFactor { k, site } => structure_factor(batch, k, site),
        }
    }
}

/// The named observable evaluated on the raw training data per grid point.
pub fn data_phase_map(dataset: &GridDataset, observable: Observable, label: &str) -> Result<PhaseMap> {
    let boundary = dataset.template.boundary;
    let cells = dataset
        .records
        .iter()
        .map(|r| observable.evaluate(&r.samples, boundary))
        .collect::<Result<Vec<_>>>()?;
    PhaseMap::new(
        dataset.axis1_values.clone(),
        dataset.axis2_values.clone(),
        cells,
        label,
    )
}

/// Encode -> sample z -> generate one configuration per input, then evaluate
/// the observable on the generated batch at each grid point. The dVAE's
/// real-valued output is thresholded at 0 (ties to +1).
pub fn reconstruction_map(
    model: &VaeModel,
    dataset: &GridDataset,
    observable: Observable,
    seed: u64,
    label: &str,
) -> Result<PhaseMap> {
    if dataset.n_sites() != model.n_sites() {
        return Err(Error::invalid("dataset/model site count mismatch"));
    }
    let boundary = dataset.template.boundary;
    let d = model.d_latent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        let mut generated: Vec<SpinConfiguration> = Vec::with_capacity(record.samples.len());
        for chunk in record.samples.chunks(512) {
            let (mu, lv) = model.encode_batch(&batch_to_tensor(chunk));
            let mut z = Tensor::zeros(vec![chunk.len(), d]);
            for bi in 0..chunk.len() {
                for j in 0..d {
                    let eps: f64 = rng.sample(rand_distr::StandardNormal);
                    z.values_mut()[bi * d + j] =
                        mu.at2(bi, j) + (0.5 * lv.at2(bi, j)).exp() * eps;
                }
            }
            match model.config.variant {
                Variant::CpVae => {
                    let sample_seed = rng.gen();
                    generated.extend(model.autoregressive_sample_batch(&z, sample_seed)?);
                }
                Variant::DVae => {
                    let out = model.dvae_decode_batch(&z)?;
                    for bi in 0..chunk.len() {
                        generated.push(SpinConfiguration::new(
                            (0..model.n_sites())
                                .map(|s| if out.at2(bi, s) >= 0.0 { 1 } else { -1 })
                                .collect(),
                        )?);
                    }
                }
            }
        }
        cells.push(observable.evaluate(&generated, boundary)?);
    }
    PhaseMap::new(
        dataset.axis1_values.clone(),
        dataset.axis2_values.clone(),
        cells,
        label,
    )
}

/// Pearson correlation coefficient between two equal-length series.
pub fn pearson_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("pearson correlation needs two equal series of length >= 2"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(Error::invalid("pearson correlation undefined for constant series"));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Mean absolute difference between the cells of two maps on the same grid.
pub fn map_mean_absolute_error(a: &PhaseMap, b: &PhaseMap) -> Result<f64> {
    if a.cells.len() != b.cells.len() {
        return Err(Error::shape(format!("{} cells", a.cells.len()), format!("{}", b.cells.len())));
    }
    Ok(a
        .cells
        .iter()
        .zip(&b.cells)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.cells.len() as f64)
}
