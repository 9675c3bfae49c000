use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::lanczos::GroundStateVector;
use super::SpinConfiguration;
use crate::{Error, Result};

/// Exact Born sampling by inverse CDF over the full 2^N probability table.
///
/// Bit `k` of the basis index maps to site `k` (LSB = site 0, set bit = +1).
pub fn sample_configurations(
    state: &GroundStateVector,
    count: usize,
    seed: u64,
) -> Result<Vec<SpinConfiguration>> {
    if count == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let norm = state.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "state must be normalized (norm = {norm:.12})"
        )));
    }
    let n_sites = state.n_sites();
    let mut cdf = Vec::with_capacity(state.amplitudes.len());
    let mut acc = 0.0;
    for a in &state.amplitudes {
        acc += a * a;
        cdf.push(acc);
    }
    let total = acc;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.gen_range(0.0..total);
        let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        out.push(SpinConfiguration::from_basis_index(idx, n_sites));
    }
    Ok(out)
}

/// `<psi| Z^i Z^j |psi> = sum_x |psi(x)|^2 x_i x_j` (equals 1 when i = j).
pub fn exact_expectation_zz(state: &GroundStateVector, i: usize, j: usize) -> Result<f64> {
    let n = state.n_sites();
    if i >= n || j >= n {
        return Err(Error::invalid(format!(
            "site index out of range (n_sites = {n})"
        )));
    }
    let mut acc = 0.0;
    for (s, a) in state.amplitudes.iter().enumerate() {
        let zi = if (s >> i) & 1 == 1 { 1.0 } else { -1.0 };
        let zj = if (s >> j) & 1 == 1 { 1.0 } else { -1.0 };
        acc += a * a * zi * zj;
    }
    Ok(acc)
}

/// Single-site `<psi| Z^i |psi>`.
pub fn exact_expectation_z(state: &GroundStateVector, i: usize) -> Result<f64> {
    let n = state.n_sites();
    if i >= n {
        return Err(Error::invalid(format!(
            "site index out of range (n_sites = {n})"
        )));
    }
    let mut acc = 0.0;
    for (s, a) in state.amplitudes.iter().enumerate() {
        let zi = if (s >> i) & 1 == 1 { 1.0 } else { -1.0 };
        acc += a * a * zi;
    }
    Ok(acc)
}
