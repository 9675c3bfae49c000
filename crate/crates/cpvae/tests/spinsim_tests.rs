//! Exact-solver, sampler and dataset tests backed by independent dense
//! oracles (Pauli tensor products diagonalized with nalgebra).

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use cpvae::spinsim::{
    apply_hamiltonian, exact_expectation_z, exact_expectation_zz, generate_grid_dataset,
    lanczos_ground_state, linspace, logspace, read_grid_dataset, sample_configurations,
    write_grid_dataset, Boundary, HamiltonianSpec, SpinConfiguration, LANCZOS_DEFAULT_MAX_ITER,
    LANCZOS_DEFAULT_TOL,
};

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

fn pauli_z() -> DMatrix<f64> {
    // Basis index order (bit clear = spin -1, bit set = spin +1).
    DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0])
}

fn pauli_x() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
}

fn identity2() -> DMatrix<f64> {
    DMatrix::identity(2, 2)
}

/// Operator acting with `op` on the listed sites (site k = bit k of the
/// basis index, so site N-1 is the leftmost Kronecker factor).
fn site_operator(n: usize, sites: &[(usize, DMatrix<f64>)]) -> DMatrix<f64> {
    let mut out = DMatrix::identity(1, 1);
    for k in (0..n).rev() {
        let factor = sites
            .iter()
            .find(|(s, _)| *s == k)
            .map(|(_, m)| m.clone())
            .unwrap_or_else(identity2);
        out = kron(&out, &factor);
    }
    out
}

/// Dense Hamiltonian built from explicit tensor products, independent of
/// the bitwise fast path.
fn dense_hamiltonian(spec: &HamiltonianSpec) -> DMatrix<f64> {
    let n = spec.n_sites;
    let dim = 1 << n;
    let mut h = DMatrix::zeros(dim, dim);
    match spec.model {
        cpvae::spinsim::SpinModel::NnnTfim => {
            let j2 = spec.j2.unwrap();
            for i in 0..n {
                let nn = site_operator(n, &[(i, pauli_z()), ((i + 1) % n, pauli_z())]);
                h -= nn;
                if j2 != 0.0 {
                    let nnn = site_operator(n, &[(i, pauli_z()), ((i + 2) % n, pauli_z())]);
                    h += j2 * nnn;
                }
            }
        }
        cpvae::spinsim::SpinModel::LrTfim => {
            let alpha = spec.alpha.unwrap();
            for i in 0..n {
                for j in i + 1..n {
                    let zz = site_operator(n, &[(i, pauli_z()), (j, pauli_z())]);
                    h -= zz / ((j - i) as f64).powf(alpha);
                }
            }
        }
    }
    for i in 0..n {
        h += spec.h * site_operator(n, &[(i, pauli_x())]);
    }
    h
}

fn dense_ground_energy(spec: &HamiltonianSpec) -> f64 {
    let h = dense_hamiltonian(spec);
    let eig = h.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn random_spec(rng: &mut ChaCha8Rng) -> HamiltonianSpec {
    let n = rng.gen_range(3..=8);
    if rng.gen::<bool>() {
        HamiltonianSpec::nnn(n, rng.gen_range(0.0..1.0), rng.gen_range(0.0..2.0))
    } else {
        HamiltonianSpec::lr(n, rng.gen_range(1.0..5.0), rng.gen_range(1.6..10.0))
    }
}

#[test]
fn lanczos_matches_dense_diagonalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for trial in 0..20 {
        let spec = random_spec(&mut rng);
        let state = lanczos_ground_state(&spec, 1e-10, LANCZOS_DEFAULT_MAX_ITER, 100 + trial)
            .expect("lanczos convergence");
        let exact = dense_ground_energy(&spec);
        let rel = (state.energy - exact).abs() / exact.abs().max(1.0);
        assert!(
            rel < 1e-8,
            "trial {trial}: spec {spec:?} lanczos {} vs dense {exact} (rel {rel:.3e})",
            state.energy
        );
    }
}

#[test]
fn apply_hamiltonian_matches_dense_matvec() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..6 {
        let spec = random_spec(&mut rng);
        let dim = 1usize << spec.n_sites;
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = apply_hamiltonian(&spec, &v).unwrap();
        let dense = dense_hamiltonian(&spec) * DMatrix::from_column_slice(dim, 1, &v);
        for s in 0..dim {
            assert!((fast[s] - dense[(s, 0)]).abs() < 1e-10);
        }
    }
}

#[test]
fn ground_state_amplitudes_match_dense_eigenvector() {
    let spec = HamiltonianSpec::nnn(6, 0.4, 0.7);
    let state = lanczos_ground_state(&spec, 1e-12, LANCZOS_DEFAULT_MAX_ITER, 3).unwrap();
    let h = dense_hamiltonian(&spec);
    let eig = h.symmetric_eigen();
    let (kmin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let v = eig.eigenvectors.column(kmin);
    // Fix the dense eigenvector to the same sign convention.
    let (imax, _) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .unwrap();
    let sign = v[imax].signum();
    for (s, amp) in state.amplitudes.iter().enumerate() {
        assert!((amp - sign * v[s]).abs() < 1e-7, "component {s}");
    }
}

#[test]
fn h_zero_nnn_ground_state_is_ferromagnetic_pair() {
    // At h = 0, j2 = 0 the NNN chain is classical; the ground space is the
    // two fully polarized states.
    let spec = HamiltonianSpec::nnn(5, 0.0, 0.0);
    let state = lanczos_ground_state(&spec, 1e-10, LANCZOS_DEFAULT_MAX_ITER, 9).unwrap();
    assert!((state.energy - (-5.0)).abs() < 1e-8);
    let p_up = state.amplitudes[(1 << 5) - 1].powi(2);
    let p_down = state.amplitudes[0].powi(2);
    assert!((p_up + p_down - 1.0).abs() < 1e-8);
}

#[test]
fn sampler_chi_square_against_born_probabilities() {
    let spec = HamiltonianSpec::nnn(4, 0.3, 0.9);
    let state = lanczos_ground_state(&spec, 1e-12, LANCZOS_DEFAULT_MAX_ITER, 5).unwrap();
    let count = 40_000usize;
    let samples = sample_configurations(&state, count, 77).unwrap();
    let mut observed = vec![0usize; 16];
    for s in &samples {
        let mut idx = 0usize;
        for k in 0..4 {
            if s.spin(k) > 0.0 {
                idx |= 1 << k;
            }
        }
        observed[idx] += 1;
    }
    let mut chi2 = 0.0;
    let mut dof = 0usize;
    for (idx, &obs) in observed.iter().enumerate() {
        let expected = state.amplitudes[idx].powi(2) * count as f64;
        if expected > 5.0 {
            chi2 += (obs as f64 - expected).powi(2) / expected;
            dof += 1;
        }
    }
    let dist = ChiSquared::new((dof - 1) as f64).unwrap();
    let p = 1.0 - dist.cdf(chi2);
    assert!(p > 1e-4, "chi2 {chi2:.2} with {dof} bins gives p = {p:.2e}");
}

#[test]
fn sampled_correlators_match_exact_expectations() {
    let points = [
        HamiltonianSpec::nnn(8, 1.0, 0.1),
        HamiltonianSpec::nnn(8, 0.5, 1.0),
        HamiltonianSpec::lr(8, 2.0, 3.0),
    ];
    for (ti, spec) in points.iter().enumerate() {
        let state = lanczos_ground_state(spec, 1e-12, LANCZOS_DEFAULT_MAX_ITER, 11).unwrap();
        let count = 20_000usize;
        let samples = sample_configurations(&state, count, 123 + ti as u64).unwrap();
        for d in [1usize, 2] {
            let exact = exact_expectation_zz(&state, 0, d).unwrap();
            let empirical: f64 = samples
                .iter()
                .map(|s| s.spin(0) * s.spin(d))
                .sum::<f64>()
                / count as f64;
            let se = ((1.0 - exact * exact).max(1e-12) / count as f64).sqrt();
            assert!(
                (empirical - exact).abs() < 4.0 * se + 1e-9,
                "spec {spec:?} d={d}: {empirical} vs {exact} (se {se:.2e})"
            );
        }
    }
}

#[test]
fn exact_zz_self_term_is_one_and_symmetric() {
    let spec = HamiltonianSpec::lr(6, 3.0, 2.0);
    let state = lanczos_ground_state(&spec, 1e-10, LANCZOS_DEFAULT_MAX_ITER, 2).unwrap();
    for i in 0..6 {
        assert!((exact_expectation_zz(&state, i, i).unwrap() - 1.0).abs() < 1e-12);
    }
    for i in 0..6 {
        for j in 0..6 {
            let a = exact_expectation_zz(&state, i, j).unwrap();
            let b = exact_expectation_zz(&state, j, i).unwrap();
            assert_eq!(a, b);
        }
    }
    // Spin-flip symmetric Hamiltonian: single-site <Z> vanishes.
    for i in 0..6 {
        assert!(exact_expectation_z(&state, i).unwrap().abs() < 1e-8);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(HamiltonianSpec::nnn(2, 0.5, 1.0).validate().is_err());
    assert!(HamiltonianSpec::nnn(2, 0.0, 1.0).validate().is_ok());
    assert!(HamiltonianSpec::nnn(10, 0.5, -0.1).validate().is_err());
    assert!(HamiltonianSpec::nnn(21, 0.5, 1.0).validate().is_err());
    assert!(HamiltonianSpec::lr(10, 2.0, 1.0).validate().is_ok());
}

#[test]
fn nnn_boundary_is_periodic_and_lr_open() {
    assert_eq!(HamiltonianSpec::nnn(5, 0.1, 0.2).boundary, Boundary::Periodic);
    assert_eq!(HamiltonianSpec::lr(5, 2.0, 0.2).boundary, Boundary::Open);
}

#[test]
fn grid_generation_is_deterministic_and_round_trips() {
    let template = HamiltonianSpec::nnn(4, 0.0, 0.0);
    let a1 = linspace(0.0, 1.0, 3);
    let a2 = linspace(0.1, 1.9, 4);
    let d1 = generate_grid_dataset(&template, &a1, &a2, 50, 99, LANCZOS_DEFAULT_TOL, LANCZOS_DEFAULT_MAX_ITER)
        .unwrap();
    let d2 = generate_grid_dataset(&template, &a1, &a2, 50, 99, LANCZOS_DEFAULT_TOL, LANCZOS_DEFAULT_MAX_ITER)
        .unwrap();
    assert_eq!(d1.records.len(), 12);
    assert_eq!(d1.total_samples(), 600);
    for (p1, p2) in d1.records.iter().zip(&d2.records) {
        for (s1, s2) in p1.samples.iter().zip(&p2.samples) {
            assert_eq!(s1.sites(), s2.sites());
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.ndjson");
    write_grid_dataset(&d1, &path).unwrap();
    let d3 = read_grid_dataset(&path).unwrap();
    assert_eq!(d3.records.len(), d1.records.len());
    assert_eq!(d3.samples_per_point, d1.samples_per_point);
    assert_eq!(d3.seed, d1.seed);
    assert_eq!(d3.template, d1.template);
    for (p1, p3) in d1.records.iter().zip(&d3.records) {
        assert_eq!(p1.axis1, p3.axis1);
        assert_eq!(p1.axis2, p3.axis2);
        for (s1, s3) in p1.samples.iter().zip(&p3.samples) {
            assert_eq!(s1.sites(), s3.sites());
        }
    }

    // Byte-determinism of the serialized artifact.
    let path2 = dir.path().join("ds2.ndjson");
    write_grid_dataset(&d2, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn grid_failures_carry_coordinates() {
    // j2 > 0 with N = 2 is invalid; the error must name the grid point.
    let template = HamiltonianSpec::nnn(2, 0.0, 0.0);
    let err = generate_grid_dataset(
        &template,
        &[0.0, 0.5],
        &[1.0],
        10,
        1,
        LANCZOS_DEFAULT_TOL,
        LANCZOS_DEFAULT_MAX_ITER,
    )
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("0.5"), "message should name the axis value: {msg}");
}

#[test]
fn logspace_endpoints_and_monotonicity() {
    let v = logspace(1.6, 10.0, 10);
    assert!((v[0] - 1.6).abs() < 1e-12);
    assert!((v[9] - 10.0).abs() < 1e-12);
    assert!(v.windows(2).all(|w| w[0] < w[1]));
    let ratio0 = v[1] / v[0];
    let ratio7 = v[8] / v[7];
    assert!((ratio0 - ratio7).abs() < 1e-9);
}

#[test]
fn bitstring_round_trip() {
    let cfg = SpinConfiguration::from_bitstring("10110").unwrap();
    assert_eq!(cfg.sites(), &[1, -1, 1, 1, -1]);
    assert_eq!(cfg.to_bitstring(), "10110");
    assert!(SpinConfiguration::from_bitstring("10x").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// H is linear: H(a u + b v) = a H u + b H v.
    #[test]
    fn hamiltonian_action_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let dim = 1usize << spec.n_sites;
        let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mixed: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let hu = apply_hamiltonian(&spec, &u).unwrap();
        let hv = apply_hamiltonian(&spec, &v).unwrap();
        let hm = apply_hamiltonian(&spec, &mixed).unwrap();
        for s in 0..dim {
            prop_assert!((hm[s] - (a * hu[s] + b * hv[s])).abs() < 1e-9);
        }
    }

    /// H is symmetric: <u, H v> = <H u, v>.
    #[test]
    fn hamiltonian_action_is_symmetric(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let dim = 1usize << spec.n_sites;
        let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hu = apply_hamiltonian(&spec, &u).unwrap();
        let hv = apply_hamiltonian(&spec, &v).unwrap();
        let uhv: f64 = u.iter().zip(&hv).map(|(x, y)| x * y).sum();
        let huv: f64 = hu.iter().zip(&v).map(|(x, y)| x * y).sum();
        prop_assert!((uhv - huv).abs() < 1e-8);
    }

    /// The diagonal part is invariant under a global spin flip.
    #[test]
    fn diagonal_invariant_under_global_flip(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_spec(&mut rng);
        let n = spec.n_sites;
        let dim = 1usize << n;
        let flip_mask = dim - 1;
        // Diagonal entries read off by applying H to basis vectors.
        for _ in 0..4 {
            let s = rng.gen_range(0..dim);
            let mut e = vec![0.0; dim];
            e[s] = 1.0;
            let he = apply_hamiltonian(&spec, &e).unwrap();
            let mut ef = vec![0.0; dim];
            ef[s ^ flip_mask] = 1.0;
            let hef = apply_hamiltonian(&spec, &ef).unwrap();
            prop_assert!((he[s] - hef[s ^ flip_mask]).abs() < 1e-10);
        }
    }
}
