//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use hero_dp::nn::{Architecture, Batch, LayerSpec, ModelState};
use hero_dp::numerics::{RngState, Tensor};

pub fn random_symmetric(n: usize, rng: &mut RngState) -> Tensor<f64> {
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            let v = rng.normal(0.0, 1.0);
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    a
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut RngState) -> Tensor<f64> {
    Tensor::from_fn(&[rows, cols], |_| rng.standard_normal())
}

/// det(A - λI) for a 3x3 matrix, cofactor expansion along the first row.
pub fn char_poly3(a: &Tensor<f64>, l: f64) -> f64 {
    let m = |i, j| a.at(i, j) - if i == j { l } else { 0.0 };
    m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
        + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
}

/// Roots of the 3x3 characteristic polynomial by grid scan plus bisection, descending.
pub fn bisection_eigenvalues(a: &Tensor<f64>) -> Vec<f64> {
    // Gershgorin bound on the spectrum.
    let bound = (0..3)
        .map(|i| (0..3).map(|j| a.at(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max)
        + 1.0;
    let steps = 200_000;
    let h = 2.0 * bound / steps as f64;
    let mut roots = Vec::new();
    let mut lo = -bound;
    let mut f_lo = char_poly3(a, lo);
    for s in 1..=steps {
        let hi = -bound + s as f64 * h;
        let f_hi = char_poly3(a, hi);
        if f_lo == 0.0 {
            roots.push(lo);
        } else if f_lo.signum() != f_hi.signum() && f_hi != 0.0 {
            let (mut l, mut r) = (lo, hi);
            for _ in 0..200 {
                let mid = 0.5 * (l + r);
                let fm = char_poly3(a, mid);
                if fm == 0.0 {
                    l = mid;
                    r = mid;
                    break;
                }
                if fm.signum() == f_lo.signum() {
                    l = mid;
                } else {
                    r = mid;
                }
            }
            roots.push(0.5 * (l + r));
        }
        lo = hi;
        f_lo = f_hi;
    }
    roots.sort_by(|x, y| y.partial_cmp(x).unwrap());
    roots
}

/// Small models (≤ 10³ parameters) exercising every layer kind.
pub fn oracle_architectures() -> Vec<Architecture> {
    use LayerSpec::*;
    vec![
        Architecture::mlp(6, &[8], 3),
        Architecture::mlp(5, &[7, 6], 4),
        Architecture {
            input_shape: vec![2, 7, 7],
            num_classes: 3,
            layers: vec![
                Conv { filters: 3, kernel: 3 },
                Relu,
                MaxPool { size: 2 },
                Flatten,
                Dense { units: 5 },
                Relu,
                Dense { units: 3 },
            ],
        },
    ]
}

/// Largest relative error between analytic per-example gradients and central
/// differences of the single-example loss, over every parameter.
///
/// The relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// parameters with (near-)zero gradient from dividing by zero.
pub fn finite_difference_error(model: &ModelState<f64>, x: &[f64], label: usize, h: f64, floor: f64) -> f64 {
    let inputs = Tensor::new(vec![1, x.len()], x.to_vec()).unwrap();
    let batch = Batch::new(inputs, vec![label], model.num_classes()).unwrap();
    let analytic = model.per_example_backward(&batch).unwrap().per_example.remove(0);
    let base: Vec<Tensor<f64>> = model.params().cloned().collect();
    let loss_at = |layer: usize, idx: usize, delta: f64| {
        let mut p = base.clone();
        p[layer].data_mut()[idx] += delta;
        model.with_layers(p).unwrap().loss(&batch).unwrap()
    };
    let mut worst = 0.0f64;
    for (layer, g) in analytic.iter().enumerate() {
        for idx in 0..g.len() {
            let numeric = (loss_at(layer, idx, h) - loss_at(layer, idx, -h)) / (2.0 * h);
            let a = g.data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// `D_α(N(μ1,σ²) ‖ N(μ2,σ²))` by composite Simpson quadrature of `∫ p^α q^{1-α}`.
pub fn renyi_quadrature(mu1: f64, mu2: f64, sigma: f64, alpha: f64) -> f64 {
    let log_pdf =
        |x: f64, mu: f64| -0.5 * ((x - mu) / sigma).powi(2) - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    // The integrand is a Gaussian bump centred at α μ1 + (1-α) μ2 with std σ.
    let centre = alpha * mu1 + (1.0 - alpha) * mu2;
    let (a, b) = (centre - 40.0 * sigma, centre + 40.0 * sigma);
    let n = 200_000;
    let h = (b - a) / n as f64;
    let f = |x: f64| (alpha * log_pdf(x, mu1) + (1.0 - alpha) * log_pdf(x, mu2)).exp();
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    (s * h / 3.0).ln() / (alpha - 1.0)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
