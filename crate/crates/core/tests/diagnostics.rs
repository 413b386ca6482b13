mod common;

use common::median;
use hero_dp::data::synthetic_clusters;
use hero_dp::diagnostics::{
    diagnose, expected_abs_cosine, linear_perturbation_variance, linear_perturbation_variance_from_draws, lot_updates,
    mean_abs_cosine, noise_model_alignment, probe_noise_draws, utility_gap, BinaryProbe, DiagnoseConfig, ProbeNoise,
};
use hero_dp::dp_optim::{OptimizerKind, TrainConfig};
use hero_dp::guidance::{compute_guidance, GuidanceScope};
use hero_dp::nn::{init_model, Architecture, ModelState};
use hero_dp::numerics::{RngState, Tensor};

#[test]
fn gap_of_pure_noise_is_its_norm() {
    let clean = vec![
        Tensor::vector(vec![0.3, -1.2]).unwrap(),
        Tensor::vector(vec![5.0]).unwrap(),
    ];
    let noisy = vec![
        Tensor::vector(vec![2.3, -1.2]).unwrap(),
        Tensor::vector(vec![5.0 + 5f64.sqrt()]).unwrap(),
    ];
    assert!((utility_gap(&noisy, &clean).unwrap() - 3.0).abs() < 1e-12);
    assert_eq!(utility_gap(&clean, &clean).unwrap(), 0.0);
    assert!(utility_gap(&clean[..1], &clean).is_err());
}

#[test]
fn mean_squared_gap_matches_injected_variance() {
    let data = synthetic_clusters::<f64>(40, &[4], 2, 0.5, &mut RngState::new(1)).unwrap();
    let arch = Architecture::mlp(4, &[3], 2);
    let model: ModelState<f64> = init_model(&arch, &mut RngState::new(2)).unwrap();
    let batch = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let mut cfg = TrainConfig::new(OptimizerKind::DpSgd, arch);
    cfg.sigma = 1.5;
    cfg.clip = 0.4;
    let s = 8.0;
    let want = model.num_params() as f64 * (cfg.sigma * cfg.clip).powi(2) / (s * s);
    let mut rng = RngState::new(3);
    let draws = 10_000;
    let mean = (0..draws)
        .map(|_| {
            let (noisy, clean) = lot_updates(&model, &batch, &cfg, None, &mut rng).unwrap();
            utility_gap(&noisy, &clean).unwrap().powi(2)
        })
        .sum::<f64>()
        / draws as f64;
    assert!((mean / want - 1.0).abs() <= 0.03, "{mean} vs {want}");

    cfg.sigma = 0.0;
    let (noisy, clean) = lot_updates(&model, &batch, &cfg, None, &mut rng).unwrap();
    assert_eq!(utility_gap(&noisy, &clean).unwrap(), 0.0);
}

#[test]
fn probe_variance_trivial_cases_and_relabel_symmetry() {
    let mut rng = RngState::new(4);
    let probe = BinaryProbe::synthetic(40, 6, 1.0, &mut rng).unwrap();
    assert_eq!(
        linear_perturbation_variance(&probe, 100, 0.0, ProbeNoise::Isotropic, &mut rng).unwrap(),
        0.0
    );

    let zeros = Tensor::zeros(&[40, 6]);
    let draws = probe_noise_draws(&probe.w, 100, 1.0, ProbeNoise::Isotropic, &mut rng).unwrap();
    assert_eq!(
        linear_perturbation_variance_from_draws(&probe.w, &zeros, &probe.y, &draws).unwrap(),
        0.0
    );

    // (w, y, N) → (−w, −y, −N) leaves every summand unchanged.
    let a = linear_perturbation_variance_from_draws(&probe.w, &probe.x, &probe.y, &draws).unwrap();
    let neg_w = probe.w.scaled(-1.0);
    let neg_y: Vec<f64> = probe.y.iter().map(|v| -v).collect();
    let neg_draws: Vec<Vec<f64>> = draws.iter().map(|z| z.iter().map(|v| -v).collect()).collect();
    let b = linear_perturbation_variance_from_draws(&neg_w, &probe.x, &neg_y, &neg_draws).unwrap();
    assert!(a > 0.0);
    assert!((a - b).abs() <= 1e-12 * a);

    assert!(linear_perturbation_variance_from_draws(&probe.w, &probe.x, &vec![0.5; 40], &draws).is_err());
}

#[test]
fn orthogonal_noise_has_no_larger_probe_variance() {
    let mut ratios = Vec::new();
    for seed in 0..20 {
        let mut rng = RngState::new(100 + seed);
        let probe = BinaryProbe::synthetic(60, 8, 1.5, &mut rng).unwrap();
        let iso =
            linear_perturbation_variance(&probe, 400, 1.0, ProbeNoise::Isotropic, &mut RngState::new(seed)).unwrap();
        let orth =
            linear_perturbation_variance(&probe, 400, 1.0, ProbeNoise::Orthogonal, &mut RngState::new(seed)).unwrap();
        ratios.push(orth / iso);
    }
    assert!(median(ratios.clone()) <= 1.0, "{ratios:?}");
}

#[test]
fn cosine_oracles() {
    // E|cos| for a uniform direction in R^n: Γ(n/2) / (√π Γ((n+1)/2)).
    let closed = [
        (2, 2.0 / std::f64::consts::PI),
        (3, 0.5),
        (4, 4.0 / (3.0 * std::f64::consts::PI)),
        (5, 0.375),
    ];
    let mut rng = RngState::new(6);
    for (n, want) in closed {
        assert!((expected_abs_cosine(n) - want).abs() < 1e-12);
        let v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let samples: Vec<Vec<f64>> = (0..20_000)
            .map(|_| (0..n).map(|_| rng.standard_normal()).collect())
            .collect();
        let (mean, _) = mean_abs_cosine(&v, samples.iter().map(Vec::as_slice)).unwrap();
        assert!((mean / want - 1.0).abs() <= 0.05, "n={n}: {mean} vs {want}");
    }

    let w = Tensor::vector(vec![1.0, 2.0, -0.5, 0.3]).unwrap();
    let orth = probe_noise_draws(&w, 1000, 1.0, ProbeNoise::Orthogonal, &mut rng).unwrap();
    let (mean, se) = mean_abs_cosine(w.data(), orth.iter().map(Vec::as_slice)).unwrap();
    assert!(mean <= 3.0 * se.max(1e-15), "{mean} ± {se}");
    let along = [w.scaled(-2.0).into_data(), w.scaled(0.1).into_data()];
    let (mean, _) = mean_abs_cosine(w.data(), along.iter().map(Vec::as_slice)).unwrap();
    assert!((mean - 1.0).abs() < 1e-12);
    assert!(mean_abs_cosine(&[0.0, 0.0], along.iter().map(Vec::as_slice)).is_none());
}

#[test]
fn alignment_flags_zero_layers() {
    let arch = Architecture::mlp(3, &[2], 2);
    let model: ModelState<f64> = init_model(&arch, &mut RngState::new(0)).unwrap();
    // Biases start at zero.
    let g = compute_guidance(&model, 1.0, GuidanceScope::Layer).unwrap();
    let a = noise_model_alignment(&g, &model, 200, &mut RngState::new(1)).unwrap();
    assert_eq!(a.len(), model.layers().len());
    for (al, (_, p)) in a.iter().zip(model.layers()) {
        assert_eq!(al.degenerate, p.data().iter().all(|&x| x == 0.0));
        assert!((0.0..=1.0).contains(&al.mean_abs_cosine));
    }
}

#[test]
fn diagnose_is_pure_given_rng() {
    let data = synthetic_clusters::<f64>(80, &[6], 2, 0.5, &mut RngState::new(1)).unwrap();
    let model: ModelState<f64> = init_model(&Architecture::mlp(6, &[4], 2), &mut RngState::new(2)).unwrap();
    let probe = BinaryProbe::from_dataset(&data, 0, 1, 30).unwrap();
    let cfg = DiagnoseConfig {
        probe_draws: 100,
        alignment_draws: 50,
        ..DiagnoseConfig::default()
    };
    let a = diagnose(&model, &data, &probe, &cfg, 0, &RngState::new(9)).unwrap();
    let b = diagnose(&model, &data, &probe, &cfg, 0, &RngState::new(9)).unwrap();
    assert_eq!(a, b);
    assert!(a.utility_gap > 0.0 && a.utility_gap_isotropic > 0.0);
    assert_eq!(a.rows().len(), model.layers().len());
    let quiet = diagnose(
        &model,
        &data,
        &probe,
        &DiagnoseConfig { sigma: 0.0, ..cfg },
        0,
        &RngState::new(9),
    )
    .unwrap();
    assert_eq!(quiet.utility_gap, 0.0);
    assert_eq!(quiet.linear_perturb_var_isotropic, 0.0);
}
