//! Exact spin-chain machinery: Hamiltonian action, Lanczos ground states,
//! Born sampling and grid-dataset generation.
//!
//! Basis-index convention used everywhere: site `k` is bit `k` of the basis
//! index (site 0 is the least-significant bit), and a set bit encodes spin
//! `+1`.

mod grid;
mod hamiltonian;
mod io;
mod lanczos;
mod sampling;

pub use grid::{derive_point_seed, generate_grid_dataset, linspace, logspace, GridDataset, GridPoint};
pub use hamiltonian::{apply_hamiltonian, Boundary, HamiltonianAction, HamiltonianSpec, SpinModel};
pub use io::{read_grid_dataset, write_grid_dataset, DATASET_FORMAT_VERSION};
pub use lanczos::{lanczos_ground_state, GroundStateVector, LANCZOS_DEFAULT_MAX_ITER, LANCZOS_DEFAULT_TOL};
pub use sampling::{exact_expectation_z, exact_expectation_zz, sample_configurations};

use crate::{Error, Result};

/// One projective measurement snapshot: a length-N sequence over {+1, -1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpinConfiguration {
    sites: Vec<i8>,
}

impl SpinConfiguration {
    pub fn new(sites: Vec<i8>) -> Result<Self> {
        if sites.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("spin configuration entries must be +1 or -1"));
        }
        Ok(Self { sites })
    }

    /// Decodes a basis index into spins, site 0 at the least-significant bit.
    pub fn from_basis_index(index: usize, n_sites: usize) -> Self {
        let sites = (0..n_sites)
            .map(|k| if (index >> k) & 1 == 1 { 1 } else { -1 })
            .collect();
        Self { sites }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[i8] {
        &self.sites
    }

    /// Spin at site `k` as a float (+1.0 or -1.0).
    pub fn spin(&self, k: usize) -> f64 {
        f64::from(self.sites[k])
    }

    pub fn flipped(&self) -> Self {
        Self {
            sites: self.sites.iter().map(|s| -s).collect(),
        }
    }

    /// Encodes as a '0'/'1' string, site 0 leftmost, '1' meaning +1.
    pub fn to_bitstring(&self) -> String {
        self.sites
            .iter()
            .map(|&s| if s == 1 { '1' } else { '0' })
            .collect()
    }

    pub fn from_bitstring(bits: &str) -> Result<Self> {
        let sites = bits
            .chars()
            .map(|c| match c {
                '1' => Ok(1),
                '0' => Ok(-1),
                other => Err(Error::invalid(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<i8>>>()?;
        Ok(Self { sites })
    }
}
