use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpinModel {
    NnnTfim,
    LrTfim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Open,
}

/// Which chain Hamiltonian to build and with which couplings.
///
/// NNN-TFIM: `H = sum_i -Z^i Z^{i+1} + j2 Z^i Z^{i+2} + h X^i` with periodic
/// bonds `i = 0..N-1` for both ZZ terms (at N = 2 the single nearest-neighbor
/// bond is counted twice).
///
/// LR-TFIM: `H = h sum_i X^i - sum_{i<j} Z^i Z^j / |i-j|^alpha` with open
/// boundaries; each unordered pair contributes exactly once.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub model: SpinModel,
    pub n_sites: usize,
    pub boundary: Boundary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub j2: Option<f64>,
    pub h: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
}

impl HamiltonianSpec {
    pub fn nnn(n_sites: usize, j2: f64, h: f64) -> Self {
        Self {
            model: SpinModel::NnnTfim,
            n_sites,
            boundary: Boundary::Periodic,
            j2: Some(j2),
            h,
            alpha: None,
        }
    }

    pub fn lr(n_sites: usize, alpha: f64, h: f64) -> Self {
        Self {
            model: SpinModel::LrTfim,
            n_sites,
            boundary: Boundary::Open,
            j2: None,
            h,
            alpha: Some(alpha),
        }
    }

    pub fn dim(&self) -> usize {
        1 << self.n_sites
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0 {
            return Err(Error::invalid("n_sites must be positive"));
        }
        if self.n_sites > 20 {
            return Err(Error::invalid("n_sites > 20 is not supported"));
        }
        if self.h < 0.0 || !self.h.is_finite() {
            return Err(Error::invalid("transverse field h must be finite and >= 0"));
        }
        match self.model {
            SpinModel::NnnTfim => {
                if self.boundary != Boundary::Periodic {
                    return Err(Error::invalid("NNN-TFIM requires periodic boundaries"));
                }
                let j2 = self
                    .j2
                    .ok_or_else(|| Error::invalid("NNN-TFIM requires j2"))?;
                if !(0.0..=1.0).contains(&j2) {
                    return Err(Error::invalid("j2 must lie in [0, 1]"));
                }
                if self.alpha.is_some() {
                    return Err(Error::invalid("alpha is not a NNN-TFIM parameter"));
                }
                // Next-nearest bonds are only well-defined from N = 3 on.
                if j2 > 0.0 && self.n_sites < 3 {
                    return Err(Error::invalid("NNN-TFIM with j2 > 0 requires n_sites >= 3"));
                }
            }
            SpinModel::LrTfim => {
                if self.boundary != Boundary::Open {
                    return Err(Error::invalid("LR-TFIM requires open boundaries"));
                }
                let alpha = self
                    .alpha
                    .ok_or_else(|| Error::invalid("LR-TFIM requires alpha"))?;
                if !(alpha > 0.0) || !alpha.is_finite() {
                    return Err(Error::invalid("alpha must be finite and > 0"));
                }
                if self.j2.is_some() {
                    return Err(Error::invalid("j2 is not a LR-TFIM parameter"));
                }
            }
        }
        Ok(())
    }
}

/// Matrix-free Hamiltonian action with the diagonal precomputed.
///
/// The matrix is never materialized: Z terms are a diagonal lookup, the
/// transverse field contributes one single-bit-flip term per site.
pub struct HamiltonianAction {
    spec: HamiltonianSpec,
    diagonal: Vec<f64>,
}

impl HamiltonianAction {
    pub fn new(spec: HamiltonianSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_sites;
        let dim = spec.dim();
        let mut diagonal = vec![0.0; dim];
        match spec.model {
            SpinModel::NnnTfim => {
                let j2 = spec.j2.unwrap_or(0.0);
                for (s, d) in diagonal.iter_mut().enumerate() {
                    let mut e = 0.0;
                    if n >= 2 {
                        for i in 0..n {
                            let zi = bit_spin(s, i);
                            e -= zi * bit_spin(s, (i + 1) % n);
                            if n >= 3 {
                                e += j2 * zi * bit_spin(s, (i + 2) % n);
                            }
                        }
                    }
                    *d = e;
                }
            }
            SpinModel::LrTfim => {
                let alpha = spec.alpha.unwrap();
                for (s, d) in diagonal.iter_mut().enumerate() {
                    let mut e = 0.0;
                    for i in 0..n {
                        let zi = bit_spin(s, i);
                        for j in (i + 1)..n {
                            e -= zi * bit_spin(s, j) / ((j - i) as f64).powf(alpha);
                        }
                    }
                    *d = e;
                }
            }
        }
        Ok(Self { spec, diagonal })
    }

    pub fn spec(&self) -> &HamiltonianSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.diagonal.len()
    }

    /// Writes `H v` into `out`.
    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        let dim = self.dim();
        if v.len() != dim || out.len() != dim {
            return Err(Error::shape(
                format!("vectors of length {dim}"),
                format!("{} / {}", v.len(), out.len()),
            ));
        }
        for (o, (&d, &x)) in out.iter_mut().zip(self.diagonal.iter().zip(v)) {
            *o = d * x;
        }
        let h = self.spec.h;
        if h != 0.0 {
            for k in 0..self.spec.n_sites {
                let mask = 1usize << k;
                for s in 0..dim {
                    out[s ^ mask] += h * v[s];
                }
            }
        }
        Ok(())
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.apply_into(v, &mut out)?;
        Ok(out)
    }
}

/// One-shot `H v` for callers that do not reuse the action.
pub fn apply_hamiltonian(spec: &HamiltonianSpec, v: &[f64]) -> Result<Vec<f64>> {
    HamiltonianAction::new(*spec)?.apply(v)
}

#[inline]
fn bit_spin(state: usize, site: usize) -> f64 {
    if (state >> site) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}
