use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Floor for the relative-error denominator; below it the comparison is
/// effectively absolute.
const DENOM_FLOOR: f64 = 1e-3;

/// Compares analytic gradients against central finite differences of a
/// scalar loss, perturbing every parameter entry in turn. Returns the
/// maximum relative error.
pub fn finite_difference_check(
    params: &mut [Tensor],
    analytic: &[Tensor],
    mut loss: impl FnMut(&[Tensor]) -> f64,
    step: f64,
) -> f64 {
    assert!(step > 0.0, "finite-difference step must be > 0");
    assert_eq!(params.len(), analytic.len());
    let mut max_err: f64 = 0.0;
    for pi in 0..params.len() {
        for vi in 0..params[pi].len() {
            let original = params[pi].values()[vi];
            params[pi].values_mut()[vi] = original + step;
            let plus = loss(params);
            params[pi].values_mut()[vi] = original - step;
            let minus = loss(params);
            params[pi].values_mut()[vi] = original;
            let fd = (plus - minus) / (2.0 * step);
            let ad = analytic[pi].values()[vi];
            let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(DENOM_FLOOR);
            max_err = max_err.max(err);
        }
    }
    max_err
}

/// Sampled variant of [`finite_difference_check`] for large models: probes a
/// seeded uniform subset of parameter entries (every tensor gets at least one
/// probe) instead of all of them. Returns the maximum relative error over the
/// probed entries.
pub fn finite_difference_check_sampled(
    params: &mut [Tensor],
    analytic: &[Tensor],
    mut loss: impl FnMut(&[Tensor]) -> f64,
    step: f64,
    max_probes: usize,
    seed: u64,
) -> f64 {
    assert!(step > 0.0, "finite-difference step must be > 0");
    assert_eq!(params.len(), analytic.len());
    let total: usize = params.iter().map(|t| t.len()).sum();
    if total <= max_probes {
        return finite_difference_check(params, analytic, loss, step);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes: Vec<(usize, usize)> = (0..params.len())
        .filter(|&pi| params[pi].len() > 0)
        .map(|pi| (pi, rng.gen_range(0..params[pi].len())))
        .collect();
    while probes.len() < max_probes {
        let pi = rng.gen_range(0..params.len());
        if params[pi].len() > 0 {
            probes.push((pi, rng.gen_range(0..params[pi].len())));
        }
    }
    let mut max_err: f64 = 0.0;
    for (pi, vi) in probes {
        let original = params[pi].values()[vi];
        params[pi].values_mut()[vi] = original + step;
        let plus = loss(params);
        params[pi].values_mut()[vi] = original - step;
        let minus = loss(params);
        params[pi].values_mut()[vi] = original;
        let fd = (plus - minus) / (2.0 * step);
        let ad = analytic[pi].values()[vi];
        let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(DENOM_FLOOR);
        max_err = max_err.max(err);
    }
    max_err
}
