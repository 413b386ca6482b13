//! Instruments for the noise/model relationship: the utility gap between a
//! noisy and a clean update, the variance of a linear classifier's correction
//! under parameter noise, and the alignment of guided noise with the weights.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dp_optim::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::guidance::{compute_guidance, GuidanceScope, NoiseGuidance};
use crate::nn::{Batch, Grads, ModelState};
use crate::numerics::{gauss_sample, RngState, Tensor};
use crate::scalar::Scalar;

/// `‖noisy - clean‖₂` over all layers.
pub fn utility_gap<T: Scalar>(noisy_update: &[Tensor<T>], clean_update: &[Tensor<T>]) -> Result<f64> {
    if noisy_update.len() != clean_update.len() {
        return Err(Error::shape("updates have different layer counts"));
    }
    let mut total = 0.0;
    for (a, b) in noisy_update.iter().zip(clean_update) {
        total += a.sub(b)?.cast::<f64>().sq_norm();
    }
    Ok(total.sqrt())
}

/// Noisy and clean aggregated updates `(Σ clip(g_i) + noise) / S` and
/// `Σ clip(g_i) / S` for one lot; the clean update is the per-step proxy for
/// the ideal noiseless model.
pub fn lot_updates<T: Scalar>(
    model: &ModelState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    guidance: Option<&NoiseGuidance<T>>,
    rng: &mut RngState,
) -> Result<(Grads<f64>, Grads<f64>)> {
    let lot = crate::dp_optim::lot_sum_for_diagnostics(model, batch, cfg.clip)?;
    let s = batch.len() as f64;
    let clean: Vec<Tensor<f64>> = lot.iter().map(|t| t.scaled(1.0 / s)).collect();
    let mut noisy = lot;
    if cfg.sigma > 0.0 {
        let noise: Vec<Tensor<f64>> = match (cfg.optimizer, guidance) {
            (OptimizerKind::DpHero, Some(g)) => {
                let scale = if cfg.noise_clip_coupling { cfg.clip } else { 1.0 };
                g.sample_noise(rng, T::of(scale))?.iter().map(Tensor::cast).collect()
            }
            (OptimizerKind::DpHero, None) => return Err(Error::validation("dp-hero diagnostics need guidance")),
            _ => model
                .params()
                .map(|p| gauss_sample::<f64>(rng, p.shape(), 0.0, cfg.noise_std()))
                .collect::<Result<_>>()?,
        };
        for (a, n) in noisy.iter_mut().zip(&noise) {
            a.add_assign(n)?;
        }
    }
    for t in &mut noisy {
        t.scale(1.0 / s);
    }
    Ok((noisy, clean))
}

/// Two-class linear probe with labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryProbe {
    /// `n x d`.
    pub x: Tensor<f64>,
    pub y: Vec<f64>,
    /// Probe weights: difference of the class means.
    pub w: Tensor<f64>,
}

impl BinaryProbe {
    pub fn new(x: Tensor<f64>, y: Vec<f64>) -> Result<Self> {
        let (n, d) = x.dims2()?;
        check_labels(&y, n)?;
        let mut w = vec![0.0; d];
        let pos = y.iter().filter(|&&v| v > 0.0).count().max(1) as f64;
        let neg = y.iter().filter(|&&v| v < 0.0).count().max(1) as f64;
        for (i, &yi) in y.iter().enumerate() {
            let scale = if yi > 0.0 { 1.0 / pos } else { -1.0 / neg };
            for (wj, &xj) in w.iter_mut().zip(x.row(i)) {
                *wj += scale * xj;
            }
        }
        Ok(BinaryProbe {
            x,
            y,
            w: Tensor::vector(w)?,
        })
    }

    /// Two Gaussian clouds at `±mean_shift * u` for a random unit `u`, with unit spread.
    pub fn synthetic(n: usize, d: usize, mean_shift: f64, rng: &mut RngState) -> Result<Self> {
        if n < 2 || d == 0 {
            return Err(Error::validation("probe needs at least two examples and one feature"));
        }
        let mut u: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v /= norm);
        let mut data = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = if i % 2 == 0 { 1.0 } else { -1.0 };
            y.push(label);
            data.extend(u.iter().map(|&uj| label * mean_shift * uj + rng.standard_normal()));
        }
        BinaryProbe::new(Tensor::new(vec![n, d], data)?, y)
    }

    /// Examples of `class_pos` (label +1) and `class_neg` (label -1), at most `max_per_class` each.
    pub fn from_dataset<T: Scalar>(
        ds: &Dataset<T>,
        class_pos: usize,
        class_neg: usize,
        max_per_class: usize,
    ) -> Result<Self> {
        let by_class = ds.class_indices();
        let get = |c: usize| by_class.get(c).cloned().unwrap_or_default();
        let pos: Vec<usize> = get(class_pos).into_iter().take(max_per_class).collect();
        let neg: Vec<usize> = get(class_neg).into_iter().take(max_per_class).collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::validation("both probe classes need examples"));
        }
        let mut idx: Vec<usize> = pos.iter().chain(&neg).copied().collect();
        idx.sort_unstable();
        let sub = ds.subset(&idx)?;
        let y = sub
            .labels()
            .iter()
            .map(|&l| if l == class_pos { 1.0 } else { -1.0 })
            .collect();
        BinaryProbe::new(sub.inputs().cast(), y)
    }
}

fn check_labels(y: &[f64], n: usize) -> Result<()> {
    if y.len() != n {
        return Err(Error::shape(format!("{n} probe inputs but {} labels", y.len())));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::validation("probe labels must be -1 or +1"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeNoise {
    /// `sigma * z`, `z ~ N(0, I)`.
    Isotropic,
    /// The isotropic draw with its component along `w` removed, rescaled to the same norm.
    Orthogonal,
}

/// Noise vectors for the linear probe. Both kinds consume the RNG identically,
/// so equal seeds give paired draws.
pub fn probe_noise_draws(
    w: &Tensor<f64>,
    count: usize,
    sigma: f64,
    kind: ProbeNoise,
    rng: &mut RngState,
) -> Result<Vec<Vec<f64>>> {
    let d = w.len();
    let wn = w.l2_norm();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut z = gauss_sample::<f64>(rng, &[d], 0.0, 1.0)?.into_data();
        if kind == ProbeNoise::Orthogonal && wn > 0.0 {
            let before = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            let along = z.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() / (wn * wn);
            for (zj, &wj) in z.iter_mut().zip(w.data()) {
                *zj -= along * wj;
            }
            let after = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if after > 0.0 {
                z.iter_mut().for_each(|v| *v *= before / after);
            }
        }
        z.iter_mut().for_each(|v| *v *= sigma);
        out.push(z);
    }
    Ok(out)
}

/// Sample variance over `draws` of `Σ_i [(w+N)ᵀx_i y'_i − wᵀx_i y_i]` with
/// `y'_i = sign((w+N)ᵀx_i)`, i.e. `Σ_i [|(w+N)ᵀx_i| − wᵀx_i y_i]`.
pub fn linear_perturbation_variance_from_draws(
    w: &Tensor<f64>,
    x: &Tensor<f64>,
    y: &[f64],
    draws: &[Vec<f64>],
) -> Result<f64> {
    let (n, d) = x.dims2()?;
    if w.len() != d {
        return Err(Error::shape(format!(
            "weights have {} entries, inputs have {d} features",
            w.len()
        )));
    }
    check_labels(y, n)?;
    if draws.iter().any(|z| z.len() != d) {
        return Err(Error::shape("noise draw length differs from weight length"));
    }
    if draws.len() < 2 {
        return Ok(0.0);
    }
    let clean: Vec<f64> = (0..n).map(|i| dot(w.data(), x.row(i))).collect();
    let values: Vec<f64> = draws
        .iter()
        .map(|z| {
            (0..n)
                .map(|i| {
                    let noisy = clean[i] + dot(z, x.row(i));
                    noisy.abs() - clean[i] * y[i]
                })
                .sum()
        })
        .collect();
    if values.iter().all(|&v| v == values[0]) {
        return Ok(0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Monte-Carlo variance of the linear correction under `kind` noise of scale `sigma`.
pub fn linear_perturbation_variance(
    probe: &BinaryProbe,
    noise_draws: usize,
    sigma: f64,
    kind: ProbeNoise,
    rng: &mut RngState,
) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(Error::validation(format!("sigma must be nonnegative, got {sigma}")));
    }
    let draws = probe_noise_draws(&probe.w, noise_draws, sigma, kind, rng)?;
    linear_perturbation_variance_from_draws(&probe.w, &probe.x, &probe.y, &draws)
}

/// `E|cos|` between a uniformly random direction in `R^n` and a fixed vector.
pub fn expected_abs_cosine(n: usize) -> f64 {
    assert!(n > 0, "dimension must be positive");
    let mut c = if n % 2 == 1 { 1.0 } else { 2.0 / std::f64::consts::PI };
    let mut m = if n % 2 == 1 { 1 } else { 2 };
    while m < n {
        c *= m as f64 / (m + 1) as f64;
        m += 2;
    }
    c
}

/// Mean `|cos(v, s)|` over `samples` with its standard error; `None` if `v` is zero.
pub fn mean_abs_cosine<'a>(v: &[f64], samples: impl IntoIterator<Item = &'a [f64]>) -> Option<(f64, f64)> {
    let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if vn == 0.0 {
        return None;
    }
    let cos: Vec<f64> = samples
        .into_iter()
        .map(|s| {
            let sn = s.iter().map(|a| a * a).sum::<f64>().sqrt();
            if sn == 0.0 {
                0.0
            } else {
                (dot(v, s) / (vn * sn)).abs().min(1.0)
            }
        })
        .collect();
    let n = cos.len() as f64;
    let mean = cos.iter().sum::<f64>() / n;
    let var = if cos.len() > 1 {
        cos.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, (var / n).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAlignment {
    pub layer: String,
    /// Mean absolute cosine between guided noise and the layer's parameters.
    pub mean_abs_cosine: f64,
    pub std_error: f64,
    /// The layer's parameters are all zero; the cosine is reported as 0.
    pub degenerate: bool,
}

/// Monte-Carlo `E|cos(noise_l, θ_l)|` per parameter tensor over `draws` guided-noise samples.
pub fn noise_model_alignment<T: Scalar>(
    guidance: &NoiseGuidance<T>,
    model: &ModelState<T>,
    draws: usize,
    rng: &mut RngState,
) -> Result<Vec<LayerAlignment>> {
    guidance.check_model(model)?;
    let mut samples: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(draws); model.layers().len()];
    for _ in 0..draws {
        let noise = guidance.sample_noise(rng, T::one())?;
        for (acc, n) in samples.iter_mut().zip(noise) {
            acc.push(n.cast::<f64>().into_data());
        }
    }
    Ok(model
        .layers()
        .iter()
        .zip(&samples)
        .map(|((name, p), s)| {
            let v = p.cast::<f64>().into_data();
            match mean_abs_cosine(&v, s.iter().map(Vec::as_slice)) {
                Some((mean, se)) => LayerAlignment {
                    layer: name.clone(),
                    mean_abs_cosine: mean,
                    std_error: se,
                    degenerate: false,
                },
                None => LayerAlignment {
                    layer: name.clone(),
                    mean_abs_cosine: 0.0,
                    std_error: 0.0,
                    degenerate: true,
                },
            }
        })
        .collect())
}

/// Settings for [`diagnose`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseConfig {
    pub sigma: f64,
    pub clip: f64,
    pub lot_size: usize,
    pub scope: GuidanceScope,
    /// Noise draws for the linear probe.
    pub probe_draws: usize,
    /// Guided-noise samples for the alignment estimate.
    pub alignment_draws: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig {
            sigma: 1.0,
            clip: 1.0,
            lot_size: 64,
            scope: GuidanceScope::Layer,
            probe_draws: 1000,
            alignment_draws: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub step: usize,
    /// Guided-noise utility gap on one lot.
    pub utility_gap: f64,
    /// Utility gap of isotropic noise on the same lot.
    pub utility_gap_isotropic: f64,
    /// Probe variance under isotropic and orthogonal noise.
    pub linear_perturb_var_isotropic: f64,
    pub linear_perturb_var_orthogonal: f64,
    pub alignment: Vec<LayerAlignment>,
}

/// One CSV row per layer; probe-level values repeat on every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub step: usize,
    pub layer: String,
    pub utility_gap: f64,
    pub utility_gap_isotropic: f64,
    pub linear_perturb_var_isotropic: f64,
    pub linear_perturb_var_orthogonal: f64,
    pub noise_model_cosine: f64,
    pub degenerate: bool,
}

impl DiagnosticReport {
    pub fn rows(&self) -> Vec<DiagnosticRow> {
        self.alignment
            .iter()
            .map(|a| DiagnosticRow {
                step: self.step,
                layer: a.layer.clone(),
                utility_gap: self.utility_gap,
                utility_gap_isotropic: self.utility_gap_isotropic,
                linear_perturb_var_isotropic: self.linear_perturb_var_isotropic,
                linear_perturb_var_orthogonal: self.linear_perturb_var_orthogonal,
                noise_model_cosine: a.mean_abs_cosine,
                degenerate: a.degenerate,
            })
            .collect()
    }
}

/// Runs every diagnostic for `model` on the first lot of `data` and on `probe`.
pub fn diagnose<T: Scalar>(
    model: &ModelState<T>,
    data: &Dataset<T>,
    probe: &BinaryProbe,
    cfg: &DiagnoseConfig,
    step: usize,
    rng: &RngState,
) -> Result<DiagnosticReport> {
    if cfg.lot_size == 0 || data.is_empty() {
        return Err(Error::validation("diagnostics need a nonempty lot"));
    }
    let idx: Vec<usize> = (0..cfg.lot_size.min(data.len())).collect();
    let batch = data.batch(&idx)?;
    let guidance = compute_guidance(model, cfg.sigma, cfg.scope)?;

    let mut train = TrainConfig::new(OptimizerKind::DpHero, model.arch().clone());
    train.sigma = cfg.sigma;
    train.clip = cfg.clip;
    let (noisy, clean) = lot_updates(model, &batch, &train, Some(&guidance), &mut rng.derive(&[1]))?;
    let guided_gap = utility_gap(&noisy, &clean)?;
    train.optimizer = OptimizerKind::DpSgd;
    let (noisy, clean) = lot_updates(model, &batch, &train, None, &mut rng.derive(&[1]))?;
    let utility_gap_isotropic = utility_gap(&noisy, &clean)?;

    let iso = linear_perturbation_variance(
        probe,
        cfg.probe_draws,
        cfg.sigma,
        ProbeNoise::Isotropic,
        &mut rng.derive(&[2]),
    )?;
    let orth = linear_perturbation_variance(
        probe,
        cfg.probe_draws,
        cfg.sigma,
        ProbeNoise::Orthogonal,
        &mut rng.derive(&[2]),
    )?;
    let alignment = noise_model_alignment(&guidance, model, cfg.alignment_draws, &mut rng.derive(&[3]))?;
    Ok(DiagnosticReport {
        step,
        utility_gap: guided_gap,
        utility_gap_isotropic,
        linear_perturb_var_isotropic: iso,
        linear_perturb_var_orthogonal: orth,
        alignment,
    })
}
