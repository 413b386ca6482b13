use proptest::prelude::*;

use hero_dp::data::{synthetic_clusters, Dataset};
use hero_dp::dp_optim::{clip_gradient, dp_hero_step, dp_sgd_step, sgd_lot_step, train, OptimizerKind, TrainConfig};
use hero_dp::guidance::{compute_guidance, matricize, GuidanceScope, LayerGuidance, NoiseGuidance};
use hero_dp::nn::{grads_norm, init_model, Architecture, Batch, ModelState};
use hero_dp::numerics::{RngState, Tensor};

fn clusters(n: usize, d: usize, classes: usize, seed: u64) -> Dataset<f64> {
    synthetic_clusters(n, &[d], classes, 0.5, &mut RngState::new(seed)).unwrap()
}

fn config(kind: OptimizerKind, arch: Architecture) -> TrainConfig {
    let mut cfg = TrainConfig::new(kind, arch);
    cfg.lot_size = 10;
    cfg.steps = Some(20);
    cfg.seed = 3;
    cfg
}

fn flat(model: &ModelState<f64>) -> Vec<f64> {
    model.params().flat_map(|t| t.data().to_vec()).collect()
}

#[test]
fn noiseless_optimizers_share_a_trajectory() {
    // σ = 0 and a clip bound no example reaches: all three optimizers reduce to SGD.
    let data = clusters(120, 6, 3, 1);
    let arch = Architecture::mlp(6, &[5], 3);
    let root = RngState::new(9);
    let runs: Vec<_> = [OptimizerKind::Sgd, OptimizerKind::DpSgd, OptimizerKind::DpHero]
        .into_iter()
        .map(|kind| {
            let mut cfg = config(kind, arch.clone());
            cfg.sigma = 0.0;
            cfg.clip = 1e6;
            cfg.steps = Some(40);
            train(&cfg, &data, None, &root).unwrap()
        })
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.model, runs[0].model);
        for (a, b) in r.records.iter().zip(&runs[0].records) {
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.noise_energy, 0.0);
        }
    }
}

#[test]
fn single_in_bound_example_matches_plain_sgd_and_opposite_gradients_cancel() {
    let arch = Architecture::mlp(3, &[], 2);
    let model: ModelState<f64> = init_model(&arch, &mut RngState::new(0)).unwrap();
    let x = Tensor::new(vec![1, 3], vec![0.1, -0.2, 0.05]).unwrap();
    let batch = Batch::new(x.clone(), vec![1], 2).unwrap();
    let g = model.per_example_backward(&batch).unwrap().per_example.remove(0);
    let mut cfg = config(OptimizerKind::DpSgd, arch.clone());
    cfg.sigma = 0.0;
    cfg.clip = 2.0 * grads_norm(&g);
    let (dp, _) = dp_sgd_step(&model, &batch, &cfg, &mut RngState::new(1)).unwrap();
    let (plain, _) = sgd_lot_step(&model, &batch, &cfg).unwrap();
    assert_eq!(dp, plain);
    assert_eq!(dp, hero_dp::nn::sgd_step(&model, &g, cfg.eta).unwrap());

    // A model with zero output weights: gradients of opposite labels at the same
    // input are exact negatives, so the lot sum vanishes.
    let zeros: Vec<Tensor<f64>> = model.params().map(|p| Tensor::zeros(p.shape())).collect();
    let zero = model.with_layers(zeros).unwrap();
    let both = Batch::new(
        Tensor::new(vec![2, 3], [x.data(), x.data()].concat()).unwrap(),
        vec![0, 1],
        2,
    )
    .unwrap();
    let (next, _) = dp_sgd_step(&zero, &both, &cfg, &mut RngState::new(1)).unwrap();
    assert_eq!(next, zero);
}

#[test]
fn ledger_and_records_track_every_step() {
    let data = clusters(100, 4, 2, 2);
    let arch = Architecture::mlp(4, &[3], 2);
    for kind in [OptimizerKind::DpSgd, OptimizerKind::DpHero] {
        let cfg = config(kind, arch.clone());
        let out = train(&cfg, &data, Some(&data), &RngState::new(1)).unwrap();
        assert_eq!(out.ledger.len(), 20);
        assert_eq!(out.records.len(), 20);
        assert!(out.records.iter().enumerate().all(|(i, r)| r.step == i + 1));
        assert!(out.records.iter().all(|r| r.rho_step == Some(0.5)));
        // 10 steps per epoch: evaluations after steps 10 and 20.
        assert_eq!(out.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![10, 20]);
    }
}

#[test]
fn zero_steps_return_the_initial_model() {
    let data = clusters(30, 4, 2, 2);
    let mut cfg = config(OptimizerKind::DpHero, Architecture::mlp(4, &[], 2));
    cfg.steps = Some(0);
    let root = RngState::new(5);
    let out = train(&cfg, &data, None, &root).unwrap();
    let init: ModelState<f64> = init_model(&cfg.arch, &mut root.derive(&[hero_dp::dp_optim::STREAM_INIT])).unwrap();
    assert_eq!(out.model, init);
    assert!(out.records.is_empty() && out.ledger.is_empty());
}

#[test]
fn injected_noise_energy_matches_bookkeeping() {
    let data = clusters(200, 5, 3, 4);
    let arch = Architecture::mlp(5, &[4], 3);
    let (sigma, clip) = (1.5, 0.8);
    // Every unit satisfies Σv² = kσ², so a unit of rank k contributes k²σ²clip².
    let model: ModelState<f64> = init_model(&arch, &mut RngState::new(0)).unwrap();
    let g = compute_guidance(&model, sigma, GuidanceScope::Layer).unwrap();
    let hero_expected: f64 = g
        .units
        .iter()
        .map(|u| (u.rank() * u.rank()) as f64 * sigma * sigma * clip * clip)
        .sum();
    let sgd_expected = model.num_params() as f64 * sigma * sigma * clip * clip;
    for (kind, expected) in [
        (OptimizerKind::DpHero, hero_expected),
        (OptimizerKind::DpSgd, sgd_expected),
    ] {
        let mut cfg = config(kind, arch.clone());
        cfg.sigma = sigma;
        cfg.clip = clip;
        cfg.eta = 0.01;
        cfg.steps = Some(400);
        let out = train(&cfg, &data, None, &RngState::new(6)).unwrap();
        let mean = out.records.iter().map(|r| r.noise_energy).sum::<f64>() / out.records.len() as f64;
        assert!((mean / expected - 1.0).abs() <= 0.05, "{kind:?}: {mean} vs {expected}");
    }
}

/// Guidance with all scales σ, a square orthonormal basis for the 2x2 weight and
/// a single direction for the bias.
fn isotropic_guidance(model: &ModelState<f64>, sigma: f64) -> NoiseGuidance<f64> {
    let (c, s) = (0.28f64, 0.96f64);
    let shapes: Vec<Vec<usize>> = model.params().map(|p| p.shape().to_vec()).collect();
    let units = model
        .params()
        .map(|p| {
            let (m, layout) = matricize(p).unwrap();
            let (d, k) = m.dims2().unwrap();
            let basis = if d == k {
                Tensor::from_rows(&[vec![c, -s], vec![s, c]]).unwrap()
            } else {
                Tensor::from_fn(&[d, k], |i| if i == 0 { 1.0 } else { 0.0 })
            };
            LayerGuidance::from_parts(basis, vec![sigma; k], vec![1.0; k], layout).unwrap()
        })
        .collect();
    NoiseGuidance::from_units(sigma, units, shapes).unwrap()
}

#[test]
fn isotropic_hero_noise_matches_dp_sgd_per_coordinate() {
    let arch = Architecture::mlp(2, &[], 2);
    let model: ModelState<f64> = init_model(&arch, &mut RngState::new(3)).unwrap();
    let weight_len = model.params().next().unwrap().len();
    assert_eq!(weight_len, 4);
    let batch = Batch::new(Tensor::new(vec![1, 2], vec![0.4, -0.7]).unwrap(), vec![0], 2).unwrap();
    let (sigma, clip) = (1.3, 0.5);
    let guidance = isotropic_guidance(&model, sigma);
    let mut hero = config(OptimizerKind::DpHero, arch.clone());
    let mut sgd = config(OptimizerKind::DpSgd, arch.clone());
    for c in [&mut hero, &mut sgd] {
        c.sigma = sigma;
        c.clip = clip;
        c.eta = 1.0;
    }
    // Noiseless reference: θ' = θ − clipped gradient; the difference to a noisy step is the noise.
    let mut clean_cfg = sgd.clone();
    clean_cfg.sigma = 0.0;
    let clean = flat(
        &dp_sgd_step(&model, &batch, &clean_cfg, &mut RngState::new(0))
            .unwrap()
            .0,
    );

    let trials = 100_000;
    let (mut hero_var, mut sgd_var) = (vec![0.0; weight_len], vec![0.0; weight_len]);
    let (mut rh, mut rs) = (RngState::new(10), RngState::new(11));
    for _ in 0..trials {
        let h = flat(&dp_hero_step(&model, &batch, &hero, &mut rh, &guidance).unwrap().0);
        let s = flat(&dp_sgd_step(&model, &batch, &sgd, &mut rs).unwrap().0);
        for i in 0..weight_len {
            hero_var[i] += (clean[i] - h[i]).powi(2);
            sgd_var[i] += (clean[i] - s[i]).powi(2);
        }
    }
    let want = sigma * sigma * clip * clip;
    for i in 0..weight_len {
        let (h, s) = (hero_var[i] / trials as f64, sgd_var[i] / trials as f64);
        assert!((h / want - 1.0).abs() <= 0.02, "hero coordinate {i}: {h} vs {want}");
        assert!((s / want - 1.0).abs() <= 0.02, "dp-sgd coordinate {i}: {s} vs {want}");
    }
}

#[test]
fn sgd_reduces_training_loss() {
    let data = clusters(100, 8, 4, 7);
    let mut cfg = config(OptimizerKind::Sgd, Architecture::mlp(8, &[6], 4));
    cfg.steps = Some(50);
    cfg.eta = 0.2;
    let out = train(&cfg, &data, None, &RngState::new(2)).unwrap();
    let first = out.records[..5].iter().map(|r| r.loss).sum::<f64>();
    let last = out.records[45..].iter().map(|r| r.loss).sum::<f64>();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn single_precision_training_runs_and_is_deterministic() {
    let data: Dataset<f32> = synthetic_clusters(60, &[4], 2, 0.5, &mut RngState::new(1)).unwrap();
    let cfg = config(OptimizerKind::DpHero, Architecture::mlp(4, &[3], 2));
    let a = train(&cfg, &data, None, &RngState::new(4)).unwrap();
    let b = train(&cfg, &data, None, &RngState::new(4)).unwrap();
    assert_eq!(a.model, b.model);
    assert!(a.model.params().all(|t| t.data().iter().all(|v| v.is_finite())));
}

#[test]
fn step_functions_reject_mismatched_configs() {
    let arch = Architecture::mlp(2, &[], 2);
    let model: ModelState<f64> = init_model(&arch, &mut RngState::new(3)).unwrap();
    let batch = Batch::new(Tensor::new(vec![1, 2], vec![0.4, -0.7]).unwrap(), vec![0], 2).unwrap();
    let hero = config(OptimizerKind::DpHero, arch.clone());
    assert!(dp_sgd_step(&model, &batch, &hero, &mut RngState::new(0)).is_err());
    let g = isotropic_guidance(&model, 2.0);
    assert!(dp_hero_step(&model, &batch, &hero, &mut RngState::new(0), &g).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_norm_never_exceeds_bound(values in prop::collection::vec(-50.0f64..50.0, 1..12), split in 0usize..12, cp in 0.01f64..10.0) {
        let split = split.min(values.len());
        let g = vec![
            Tensor::vector(values[..split].to_vec()).unwrap(),
            Tensor::vector(values[split..].to_vec()).unwrap(),
        ];
        let c = clip_gradient(&g, cp);
        let norm = grads_norm(&g);
        prop_assert!(grads_norm(&c) <= cp * (1.0 + 1e-12));
        if norm <= cp {
            prop_assert_eq!(c, g);
        } else {
            // Direction preserved.
            for (a, b) in c.iter().zip(&g) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    prop_assert!((x * norm / cp - y).abs() <= 1e-9 * y.abs().max(1.0));
                }
            }
        }
    }
}
