use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hamiltonian::{HamiltonianAction, HamiltonianSpec};
use crate::{Error, Result};

pub const LANCZOS_DEFAULT_TOL: f64 = 1e-10;
pub const LANCZOS_DEFAULT_MAX_ITER: usize = 500;

/// Exact ground state: 2^N real amplitudes with unit L2 norm, plus its energy.
#[derive(Debug, Clone)]
pub struct GroundStateVector {
    pub amplitudes: Vec<f64>,
    pub energy: f64,
}

impl GroundStateVector {
    pub fn n_sites(&self) -> usize {
        debug_assert!(self.amplitudes.len().is_power_of_two());
        self.amplitudes.len().trailing_zeros() as usize
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Lanczos with a seeded random start vector and full reorthogonalization
/// against the stored Krylov basis. Converged when the true residual
/// `||H psi - E psi||` drops to `tol`.
pub fn lanczos_ground_state(
    spec: &HamiltonianSpec,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<GroundStateVector> {
    if !(tol > 0.0) {
        return Err(Error::invalid("Lanczos tolerance must be > 0"));
    }
    let action = HamiltonianAction::new(*spec)?;
    let dim = action.dim();

    if dim == 1 {
        return Ok(GroundStateVector {
            amplitudes: vec![1.0],
            energy: 0.0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize(&mut v);

    let mut basis: Vec<Vec<f64>> = vec![v.clone()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![0.0; dim];
    let mut last_residual = f64::INFINITY;

    for _ in 0..max_iter {
        let vk = basis.last().unwrap().clone();
        action.apply_into(&vk, &mut w)?;
        let alpha = dot(&vk, &w);
        alphas.push(alpha);

        for (wi, vi) in w.iter_mut().zip(&vk) {
            *wi -= alpha * vi;
        }
        if let Some(&beta_prev) = betas.last() {
            let prev = &basis[basis.len() - 2];
            for (wi, pi) in w.iter_mut().zip(prev) {
                *wi -= beta_prev * pi;
            }
        }
        // Full reorthogonalization keeps the basis numerically orthonormal.
        for u in &basis {
            let c = dot(u, &w);
            for (wi, ui) in w.iter_mut().zip(u) {
                *wi -= c * ui;
            }
        }

        let (energy, mut psi) = ritz_ground(&alphas, &betas, &basis);
        let residual = residual_norm(&action, &psi, energy)?;
        last_residual = residual;
        if residual <= tol {
            canonical_sign(&mut psi);
            normalize(&mut psi);
            return Ok(GroundStateVector {
                amplitudes: psi,
                energy,
            });
        }

        let beta = dot(&w, &w).sqrt();
        if beta < 1e-14 || basis.len() == dim {
            // Invariant subspace exhausted: the Ritz pair is exact up to
            // roundoff even if the requested tolerance was tighter.
            if residual <= tol.max(1e-9) {
                canonical_sign(&mut psi);
                normalize(&mut psi);
                return Ok(GroundStateVector {
                    amplitudes: psi,
                    energy,
                });
            }
            break;
        }
        betas.push(beta);
        let mut next = w.clone();
        for x in &mut next {
            *x /= beta;
        }
        basis.push(next);
    }

    Err(Error::LanczosNoConvergence {
        max_iter,
        residual: last_residual,
    })
}

/// Smallest Ritz pair of the current tridiagonal projection, lifted back to
/// the full space through the stored basis.
fn ritz_ground(alphas: &[f64], betas: &[f64], basis: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let k = alphas.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = t.symmetric_eigen();
    let mut idx = 0;
    for i in 1..k {
        if eig.eigenvalues[i] < eig.eigenvalues[idx] {
            idx = i;
        }
    }
    let energy = eig.eigenvalues[idx];
    let y = eig.eigenvectors.column(idx);

    let dim = basis[0].len();
    let mut psi = vec![0.0; dim];
    for (coef, vec) in y.iter().zip(basis) {
        for (p, x) in psi.iter_mut().zip(vec) {
            *p += coef * x;
        }
    }
    normalize(&mut psi);
    (energy, psi)
}

fn residual_norm(action: &HamiltonianAction, psi: &[f64], energy: f64) -> Result<f64> {
    let hpsi = action.apply(psi)?;
    Ok(hpsi
        .iter()
        .zip(psi)
        .map(|(hp, p)| {
            let r = hp - energy * p;
            r * r
        })
        .sum::<f64>()
        .sqrt())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Fix the overall sign so results are stable across runs: the largest-
/// magnitude amplitude is made positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}
