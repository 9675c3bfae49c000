//! Optimizer, schedule, observable and pipeline contracts.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cpvae::analysis::{
    correlation_exponent_beta, data_phase_map, edge_bulk_correlator_difference,
    fit_correlation_exponent, fourier_order_parameter, latent_phase_map, magnetization,
    map_mean_absolute_error, pearson_correlation, reconstruction_map, spectral_entropy,
    structure_factor, two_point_correlator, Observable, PhaseMap, SnapshotSet2D,
};
use cpvae::autodiff::Tensor;
use cpvae::models::{ModelConfig, VaeModel, Variant};
use cpvae::objective::LossWeights;
use cpvae::pipeline::{
    ingest_snapshots, load_model, save_model, snapshots_to_configurations, weight_preset,
    write_atomic, HoldoutAxis, HoldoutSpec,
};
use cpvae::spinsim::{
    generate_grid_dataset, Boundary, HamiltonianSpec, SpinConfiguration, LANCZOS_DEFAULT_MAX_ITER,
    LANCZOS_DEFAULT_TOL,
};
use cpvae::trainer::{
    active_latent_neurons, adabelief_step, gamma_schedule, train, AdaBeliefState, TrainConfig,
};

fn tiny_dataset(seed: u64) -> cpvae::spinsim::GridDataset {
    let template = HamiltonianSpec::nnn(4, 0.0, 0.0);
    generate_grid_dataset(
        &template,
        &[0.0, 1.0],
        &[0.2, 1.0],
        40,
        seed,
        LANCZOS_DEFAULT_TOL,
        LANCZOS_DEFAULT_MAX_ITER,
    )
    .unwrap()
}

fn tiny_config(variant: Variant, lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: lr,
        weights: LossWeights { alpha: 0.1, beta: 1.0, gamma: 0.1 },
        gamma_min: 0.1,
        gamma_max: 0.2,
        seed: 5,
        checkpoint_every: 0,
        variant,
    }
}

#[test]
fn gamma_schedule_is_linear_between_endpoints() {
    assert_eq!(gamma_schedule(0, 100, 0.1, 0.2).unwrap(), 0.1);
    assert_eq!(gamma_schedule(100, 100, 0.1, 0.2).unwrap(), 0.2);
    let mid = gamma_schedule(50, 100, 0.1, 0.2).unwrap();
    assert!((mid - 0.15).abs() < 1e-12);
    assert!(gamma_schedule(5, 0, 0.1, 0.2).is_err());
    assert!(gamma_schedule(101, 100, 0.1, 0.2).is_err());
    // Constant schedule is allowed.
    assert_eq!(gamma_schedule(30, 100, 1.0, 1.0).unwrap(), 1.0);
}

#[test]
fn adabelief_minimizes_a_quadratic() {
    let target = [3.0, -2.0];
    let mut theta = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
    let mut state = AdaBeliefState::new(&[vec![2]]);
    for _ in 0..2000 {
        let grad = Tensor::new(
            vec![2],
            theta.values().iter().zip(&target).map(|(t, g)| t - g).collect(),
        )
        .unwrap();
        adabelief_step(&mut [&mut theta], &[grad], &mut state, 0.05).unwrap();
    }
    assert!((theta.values()[0] - 3.0).abs() < 1e-3);
    assert!((theta.values()[1] + 2.0).abs() < 1e-3);
}

#[test]
fn training_is_deterministic_per_seed() {
    let dataset = tiny_dataset(1);
    let config = tiny_config(Variant::CpVae, 0.001, 1);
    let mut m1 = VaeModel::new(ModelConfig::cpvae(4), 9).unwrap();
    let mut m2 = VaeModel::new(ModelConfig::cpvae(4), 9).unwrap();
    let h1 = train(&mut m1, &dataset, &config).unwrap();
    let h2 = train(&mut m2, &dataset, &config).unwrap();
    for ((_, a), (_, b)) in m1.params().iter().zip(m2.params().iter()) {
        assert_eq!(a.values(), b.values());
    }
    for (r1, r2) in h1.steps.iter().zip(&h2.steps) {
        assert_eq!(r1.breakdown.total.to_bits(), r2.breakdown.total.to_bits());
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let dataset = tiny_dataset(2);
    let mut config = tiny_config(Variant::CpVae, 1.0, 1);
    config.learning_rate = f64::MIN_POSITIVE;
    let mut model = VaeModel::new(ModelConfig::cpvae(4), 9).unwrap();
    let before: Vec<Vec<u64>> = model
        .params()
        .iter()
        .map(|(_, t)| t.values().iter().map(|v| v.to_bits()).collect())
        .collect();
    // lr = 0 itself is rejected by validation; the denormal-minimum run must
    // leave every parameter numerically unchanged at double precision.
    train(&mut model, &dataset, &config).unwrap();
    for ((_, t), b) in model.params().iter().zip(&before) {
        for (v, orig) in t.values().iter().zip(b) {
            assert!((v - f64::from_bits(*orig)).abs() < 1e-12);
        }
    }
    let mut bad = tiny_config(Variant::CpVae, 0.0, 1);
    bad.learning_rate = 0.0;
    let mut m2 = VaeModel::new(ModelConfig::cpvae(4), 9).unwrap();
    assert!(train(&mut m2, &dataset, &bad).is_err());
}

#[test]
fn history_csv_has_expected_columns() {
    let dataset = tiny_dataset(3);
    let config = tiny_config(Variant::CpVae, 0.001, 1);
    let mut model = VaeModel::new(ModelConfig::cpvae(4), 2).unwrap();
    let history = train(&mut model, &dataset, &config).unwrap();
    let csv = history.to_csv();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "epoch,step,reconstruction_nll,mi,tc,dim_kl,gamma_now,total");
    assert_eq!(csv.lines().count(), history.steps.len() + 1);
    assert_eq!(history.sigma_per_epoch.len(), config.epochs);
    assert_eq!(history.sigma_per_epoch[0].len(), 5);
    // Per-step gamma follows the linear schedule.
    let total_steps = history.steps.len();
    for r in &history.steps {
        let expect = 0.1 + 0.1 * r.step as f64 / total_steps as f64;
        assert!((r.gamma_now - expect).abs() < 1e-12);
    }
}

#[test]
fn zeroed_model_has_unit_sigma_and_no_active_dimensions() {
    let dataset = tiny_dataset(4);
    let mut model = VaeModel::new(ModelConfig::cpvae(4), 1).unwrap();
    let zeros: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();
    model.set_params(&zeros).unwrap();
    assert!(active_latent_neurons(&model, &dataset, 0.5).is_empty());
    let maps = latent_phase_map(&model, &dataset).unwrap();
    assert_eq!(maps.mu.len(), 5);
    assert!(maps.mu.iter().all(|m| m.cells.iter().all(|&c| c == 0.0)));
    assert!(maps.sigma.iter().all(|m| m.cells.iter().all(|&c| (c - 1.0).abs() < 1e-12)));
    assert_eq!(maps.mu[0].axis1_values, dataset.axis1_values);
    assert_eq!(maps.mu[0].axis2_values, dataset.axis2_values);
}

#[test]
fn magnetization_trivial_values() {
    let up = vec![SpinConfiguration::new(vec![1; 6]).unwrap()];
    assert_eq!(magnetization(&up, false).unwrap(), 1.0);
    let alt = vec![SpinConfiguration::new(vec![1, -1, 1, -1, 1, -1]).unwrap()];
    assert_eq!(magnetization(&alt, false).unwrap(), 0.0);
    let pair = vec![
        SpinConfiguration::new(vec![1; 6]).unwrap(),
        SpinConfiguration::new(vec![-1; 6]).unwrap(),
    ];
    assert_eq!(magnetization(&pair, true).unwrap(), 1.0);
    assert_eq!(magnetization(&pair, false).unwrap(), 0.0);
    assert!(magnetization(&[], false).is_err());
}

#[test]
fn correlator_trivial_values_and_bounds() {
    let up = vec![SpinConfiguration::new(vec![1; 6]).unwrap()];
    assert_eq!(two_point_correlator(&up, 2, Boundary::Periodic).unwrap(), 1.0);
    let alt = vec![SpinConfiguration::new(vec![1, -1, 1, -1, 1, -1]).unwrap()];
    assert_eq!(two_point_correlator(&alt, 1, Boundary::Periodic).unwrap(), -1.0);
    assert_eq!(two_point_correlator(&alt, 2, Boundary::Periodic).unwrap(), 1.0);
    assert_eq!(two_point_correlator(&alt, 1, Boundary::Open).unwrap(), -1.0);
    assert!(two_point_correlator(&up, 0, Boundary::Open).is_err());
    assert!(two_point_correlator(&up, 6, Boundary::Open).is_err());
}

#[test]
fn beta_fitter_recovers_planted_exponents() {
    for beta in [0.5, 1.0, 2.0] {
        let c: Vec<f64> = (1..=8).map(|r| (r as f64).powf(-beta)).collect();
        let fit = fit_correlation_exponent(&c);
        assert!(!fit.degenerate);
        assert!((fit.beta - beta).abs() < 1e-6, "planted {beta}, got {}", fit.beta);
    }
    // Flat correlations: slope 0.
    let flat = fit_correlation_exponent(&[1.0; 8]);
    assert!(!flat.degenerate);
    assert!(flat.beta.abs() < 1e-12);
    // Too few positive points.
    let sparse = fit_correlation_exponent(&[0.5, -0.1, -0.2, 0.3]);
    assert!(sparse.degenerate);
    assert_eq!(sparse.beta, 0.0);
    // Growing correlations give a negative exponent: clamped to 0.
    let growing: Vec<f64> = (1..=6).map(|r| r as f64).collect();
    let g = fit_correlation_exponent(&growing);
    assert!(g.degenerate);
    assert_eq!(g.beta, 0.0);
}

#[test]
fn beta_on_all_up_batch_is_zero() {
    let batch = vec![SpinConfiguration::new(vec![1; 10]).unwrap(); 4];
    let fit = correlation_exponent_beta(&batch).unwrap();
    assert_eq!(fit.beta, 0.0);
    assert!(!fit.degenerate);
}

#[test]
fn structure_factor_closed_forms() {
    let up = vec![SpinConfiguration::new(vec![1; 8]).unwrap()];
    assert!((structure_factor(&up, 0.0, 0).unwrap() - 1.0).abs() < 1e-12);
    for k in [1.0, 2.0, 3.0] {
        let s = structure_factor(&up, k, 0).unwrap();
        assert!(s.abs() < 1e-10, "k = {k}: {s}");
    }

    // i.i.d. fair coins: only the self term survives, S -> 1/N.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 8;
    let m = 60_000;
    let batch: Vec<SpinConfiguration> = (0..m)
        .map(|_| {
            SpinConfiguration::new(
                (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect(),
            )
            .unwrap()
        })
        .collect();
    let s = structure_factor(&batch, 0.8, 0).unwrap();
    let se = (n as f64 - 1.0).sqrt() / (n as f64) / (m as f64).sqrt();
    assert!((s - 1.0 / n as f64).abs() < 4.0 * se + 1e-3, "S = {s}");

    // k = 0 equals the direct mean over anchored correlators.
    let small: Vec<SpinConfiguration> = (0..50)
        .map(|_| {
            SpinConfiguration::new(
                (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect(),
            )
            .unwrap()
        })
        .collect();
    let s0 = structure_factor(&small, 0.0, 3).unwrap();
    let mut direct = 0.0;
    for j in 0..n {
        direct += if j == 3 {
            1.0
        } else {
            small.iter().map(|c| c.spin(j) * c.spin(3)).sum::<f64>() / small.len() as f64
        };
    }
    assert!((s0 - direct / n as f64).abs() < 1e-12);
}

fn snapshots(l1: usize, l2: usize, occupations: Vec<Vec<u8>>) -> SnapshotSet2D {
    SnapshotSet2D {
        lattice_shape: (l1, l2),
        occupations,
        rb_over_a: 1.0,
        delta_over_omega: 2.0,
    }
}

#[test]
fn fourier_order_parameter_closed_forms() {
    let pi = std::f64::consts::PI;
    let l = 6usize;
    // Empty lattice.
    let empty = snapshots(l, l, vec![vec![0; l * l]]);
    assert_eq!(fourier_order_parameter(&empty, pi, pi).unwrap(), 0.0);
    // Perfect checkerboard: N/2 occupied sites, all phases +1 -> sqrt(N)/2.
    let checker: Vec<u8> = (0..l * l)
        .map(|s| if (s / l + s % l) % 2 == 0 { 1 } else { 0 })
        .collect();
    let set = snapshots(l, l, vec![checker]);
    let f = fourier_order_parameter(&set, pi, pi).unwrap();
    assert!((f - (l * l) as f64 * 0.25 / ((l * l) as f64).sqrt() * 2.0).abs() < 1e-10);
    assert!((f - ((l * l) as f64).sqrt() / 2.0).abs() < 1e-10);
    // Uniform full occupation: alternating phases cancel.
    let full = snapshots(l, l, vec![vec![1; l * l]]);
    assert!(fourier_order_parameter(&full, pi, pi).unwrap().abs() < 1e-10);
    // Non-binary input is rejected.
    let bad = snapshots(l, l, vec![vec![2; l * l]]);
    assert!(fourier_order_parameter(&bad, pi, pi).is_err());
}

#[test]
fn edge_bulk_difference_cases() {
    let l = 6usize;
    // Uniform full occupation: connected correlator vanishes everywhere.
    let full = snapshots(l, l, vec![vec![1; l * l]; 4]);
    assert_eq!(edge_bulk_correlator_difference(&full).unwrap(), 0.0);

    // i.i.d. random occupations: difference compatible with zero.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 4000;
    let iid = snapshots(
        l,
        l,
        (0..m)
            .map(|_| (0..l * l).map(|_| rng.gen_range(0..=1u8)).collect())
            .collect(),
    );
    let diff = edge_bulk_correlator_difference(&iid).unwrap();
    assert!(diff.abs() < 4.0 * 0.25 / (m as f64).sqrt() + 1e-3, "diff = {diff}");

    // Perfectly correlated boundary ring, uncorrelated bulk: difference is
    // the Bernoulli variance 1/4.
    let engineered = snapshots(
        l,
        l,
        (0..m)
            .map(|_| {
                let ring = rng.gen_range(0..=1u8);
                (0..l * l)
                    .map(|s| {
                        let (r, c) = (s / l, s % l);
                        if r == 0 || c == 0 || r == l - 1 || c == l - 1 {
                            ring
                        } else {
                            rng.gen_range(0..=1u8)
                        }
                    })
                    .collect()
            })
            .collect(),
    );
    let diff = edge_bulk_correlator_difference(&engineered).unwrap();
    assert!((diff - 0.25).abs() < 0.02, "diff = {diff}");

    // Too-small lattices are rejected.
    let tiny = snapshots(2, 5, vec![vec![0; 10]]);
    assert!(edge_bulk_correlator_difference(&tiny).is_err());
}

#[test]
fn spectral_entropy_closed_forms() {
    let constant = SpinConfiguration::new(vec![1; 8]).unwrap();
    assert!(spectral_entropy(&constant).unwrap().abs() < 1e-12);
    let alternating = SpinConfiguration::new(vec![1, -1, 1, -1, 1, -1, 1, -1]).unwrap();
    assert!(spectral_entropy(&alternating).unwrap().abs() < 1e-12);
    // Period-4 square wave: power splits equally across two conjugate bins.
    let two_bin = SpinConfiguration::new(vec![1, 1, -1, -1, 1, 1, -1, -1]).unwrap();
    let s = spectral_entropy(&two_bin).unwrap();
    assert!((s - 2.0f64.ln()).abs() < 1e-12, "S = {s}");
}

#[test]
fn pearson_and_map_error_helpers() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [2.0, 4.0, 6.0, 8.0];
    assert!((pearson_correlation(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    let c = [4.0, 3.0, 2.0, 1.0];
    assert!((pearson_correlation(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    assert!(pearson_correlation(&a, &[1.0, 1.0, 1.0, 1.0]).is_err());

    let m1 = PhaseMap::new(vec![0.0], vec![0.0, 1.0], vec![1.0, 2.0], "a").unwrap();
    let m2 = PhaseMap::new(vec![0.0], vec![0.0, 1.0], vec![2.0, 0.0], "b").unwrap();
    assert!((map_mean_absolute_error(&m1, &m2).unwrap() - 1.5).abs() < 1e-12);
}

#[test]
fn phase_map_csv_layout() {
    let map = PhaseMap::new(vec![0.0, 1.0], vec![0.5], vec![3.0, 4.0], "mag").unwrap();
    let csv = map.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "axis1,axis2,value,label");
    assert_eq!(lines[1], "0,0.5,3,mag");
    assert_eq!(lines[2], "1,0.5,4,mag");
    assert!(PhaseMap::new(vec![0.0], vec![0.0], vec![1.0, 2.0], "x").is_err());
}

#[test]
fn observable_names_round_trip() {
    assert!(Observable::from_name("magnetization").is_ok());
    assert!(Observable::from_name("nn_correlator").is_ok());
    assert!(Observable::from_name("nnn_correlator").is_ok());
    assert!(Observable::from_name("beta").is_ok());
    let err = Observable::from_name("zz17").unwrap_err().to_string();
    assert!(err.contains("magnetization"), "error lists valid names: {err}");
}

#[test]
fn data_map_matches_direct_evaluation() {
    let dataset = tiny_dataset(6);
    let map = data_phase_map(&dataset, Observable::Correlator { distance: 1 }, "zz1").unwrap();
    for (cell, record) in dataset.records.iter().enumerate() {
        let direct =
            two_point_correlator(&record.samples, 1, Boundary::Periodic).unwrap();
        assert_eq!(map.cells[cell], direct);
    }
}

#[test]
fn reconstruction_map_shapes_and_determinism() {
    let dataset = tiny_dataset(7);
    let model = VaeModel::new(ModelConfig::cpvae(4), 11).unwrap();
    let obs = Observable::Correlator { distance: 1 };
    let m1 = reconstruction_map(&model, &dataset, obs, 55, "gen").unwrap();
    let m2 = reconstruction_map(&model, &dataset, obs, 55, "gen").unwrap();
    assert_eq!(m1.cells, m2.cells);
    assert_eq!(m1.cells.len(), dataset.records.len());
    assert!(m1.cells.iter().all(|c| (-1.0..=1.0).contains(c)));

    let dmodel = VaeModel::new(ModelConfig::dvae(4, 1), 11).unwrap();
    let md = reconstruction_map(&dmodel, &dataset, obs, 55, "gen").unwrap();
    assert!(md.cells.iter().all(|c| (-1.0..=1.0).contains(c)));
}

#[test]
fn holdout_spec_validation() {
    let dataset = tiny_dataset(8);
    assert!(HoldoutSpec { axis: HoldoutAxis::Axis2, lo: 0.5, hi: 0.4 }
        .validate(&dataset)
        .is_err());
    assert!(HoldoutSpec { axis: HoldoutAxis::Axis2, lo: 5.0, hi: 6.0 }
        .validate(&dataset)
        .is_err());
    assert!(HoldoutSpec { axis: HoldoutAxis::Axis2, lo: 0.1, hi: 1.5 }
        .validate(&dataset)
        .is_err());
    let ok = HoldoutSpec { axis: HoldoutAxis::Axis2, lo: 0.5, hi: 1.5 };
    ok.validate(&dataset).unwrap();
    assert!(ok.excludes(1.0));
    assert!(!ok.excludes(0.2));
}

#[test]
fn weight_presets_are_pinned() {
    let nnn = weight_preset("nnn").unwrap();
    assert_eq!((nnn.alpha, nnn.beta, nnn.gamma_min, nnn.gamma_max), (0.1, 30.0, 0.1, 0.2));
    let lr = weight_preset("lr").unwrap();
    assert_eq!((lr.alpha, lr.beta, lr.gamma_min, lr.gamma_max), (0.1, 0.5, 0.5, 10.0));
    let ryd = weight_preset("rydberg").unwrap();
    assert_eq!((ryd.alpha, ryd.beta, ryd.gamma_min, ryd.gamma_max), (0.001, 10.0, 1.0, 1.0));
    assert!(weight_preset("other").is_err());
}

#[test]
fn snapshot_ingestion_counts_and_grouping() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snaps.ndjson");
    let body = [
        r#"{"rb_over_a": 1.2, "delta_over_omega": 0.5, "bits": "0110"}"#,
        r#"{"rb_over_a": 1.2, "delta_over_omega": 0.5, "bits": "1111"}"#,
        r#"{"rb_over_a": 1.5, "delta_over_omega": 0.5, "bits": "0000"}"#,
        r#"{"rb_over_a": 1.2, "delta_over_omega": 0.5, "bits": "011"}"#,
    ]
    .join("\n");
    std::fs::write(&path, body).unwrap();
    let report = ingest_snapshots(&path, (2, 2)).unwrap();
    assert_eq!(report.accepted, 3);
    assert_eq!(report.rejected, 1);
    assert_eq!(report.rejection_lines, vec![4]);
    assert_eq!(report.sets.len(), 2);
    assert_eq!(report.sets[0].occupations.len(), 2);
    let configs = snapshots_to_configurations(&report.sets[0]).unwrap();
    assert_eq!(configs[0].sites(), &[-1, 1, 1, -1]);

    // Malformed JSON carries line information.
    std::fs::write(&path, "{not json}").unwrap();
    let err = ingest_snapshots(&path, (2, 2)).unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");

    // Empty input is a valid empty set.
    std::fs::write(&path, "").unwrap();
    let report = ingest_snapshots(&path, (2, 2)).unwrap();
    assert!(report.sets.is_empty());
    assert_eq!(report.accepted, 0);
}

#[test]
fn atomic_write_and_model_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub").join("file.txt");
    write_atomic(&path, b"hello").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), b"hello");

    let model = VaeModel::new(ModelConfig::cpvae(6), 77).unwrap();
    let ckpt = dir.path().join("model.bin");
    save_model(&model, &ckpt).unwrap();
    let loaded = load_model(&ckpt).unwrap();
    assert_eq!(loaded.config, model.config);
    for ((n1, a), (n2, b)) in model.params().iter().zip(loaded.params().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a.values(), b.values());
    }
    let z = cpvae::models::LatentSample::from_z(vec![0.1; 5]);
    let s1 = model.autoregressive_sample(&z, 4, 9).unwrap();
    let s2 = loaded.autoregressive_sample(&z, 4, 9).unwrap();
    for (a, b) in s1.iter().zip(&s2) {
        assert_eq!(a.sites(), b.sites());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    /// Observable bounds: correlator and magnetization in [-1, 1], spectral
    /// entropy in [0, ln N].
    #[test]
    fn observable_bounds(seed in 0u64..500, n in 4usize..10, m in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<SpinConfiguration> = (0..m)
            .map(|_| SpinConfiguration::new(
                (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect(),
            ).unwrap())
            .collect();
        prop_assert!(magnetization(&batch, true).unwrap() >= 0.0);
        prop_assert!(magnetization(&batch, true).unwrap() <= 1.0);
        prop_assert!(magnetization(&batch, false).unwrap().abs() <= 1.0);
        for d in 1..n {
            let c = two_point_correlator(&batch, d, Boundary::Periodic).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }
        let s = spectral_entropy(&batch[0]).unwrap();
        prop_assert!(s >= 0.0 && s <= (n as f64).ln() + 1e-12);
    }

    /// Spectral entropy is invariant under global flip and cyclic shift.
    #[test]
    fn spectral_entropy_invariances(seed in 0u64..500, n in 4usize..12, shift in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites: Vec<i8> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        let x = SpinConfiguration::new(sites.clone()).unwrap();
        let s = spectral_entropy(&x).unwrap();
        let flipped = SpinConfiguration::new(sites.iter().map(|v| -v).collect()).unwrap();
        prop_assert!((spectral_entropy(&flipped).unwrap() - s).abs() < 1e-9);
        let k = shift % n;
        let shifted: Vec<i8> = (0..n).map(|i| sites[(i + k) % n]).collect();
        let xs = SpinConfiguration::new(shifted).unwrap();
        prop_assert!((spectral_entropy(&xs).unwrap() - s).abs() < 1e-9);
    }

    /// F(k) stays within [0, sqrt(N)].
    #[test]
    fn fourier_amplitude_bounds(seed in 0u64..200, k1 in 0.0f64..6.3, k2 in 0.0f64..6.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = 4usize;
        let set = snapshots(l, l, (0..3).map(|_| {
            (0..l * l).map(|_| rng.gen_range(0..=1u8)).collect()
        }).collect());
        let f = fourier_order_parameter(&set, k1, k2).unwrap();
        prop_assert!(f >= 0.0);
        prop_assert!(f <= ((l * l) as f64).sqrt() + 1e-9);
    }
}
