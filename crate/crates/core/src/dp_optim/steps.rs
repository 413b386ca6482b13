use serde::{Deserialize, Serialize};

use crate::dp_optim::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::guidance::NoiseGuidance;
use crate::nn::{grads_norm, Batch, Grads, ModelState};
use crate::numerics::{gauss_sample, RngState, Tensor};
use crate::scalar::Scalar;

/// Examples per backward chunk; bounds memory held in per-example gradients.
const CHUNK: usize = 64;

/// Per-step training metrics, one CSV row each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean cross-entropy over the lot, before the update.
    pub loss: f64,
    /// Evaluation accuracy, present at evaluation checkpoints.
    pub acc: Option<f64>,
    pub pre_clip_mean: f64,
    pub pre_clip_max: f64,
    /// `‖noise‖²` summed over layers.
    pub noise_energy: f64,
    /// zCDP parameter of this step; absent when no noise was added.
    pub rho_step: Option<f64>,
    pub elapsed_ms: u64,
}

/// Scales the whole gradient list by `1 / max(1, ‖g‖ / cp)` (global L2 norm).
/// Gradients already within the bound are returned unchanged.
pub fn clip_gradient<T: Scalar>(g: &[Tensor<T>], cp: T) -> Grads<T> {
    let norm = grads_norm(g);
    if norm <= cp {
        return g.to_vec();
    }
    let factor = norm / cp;
    g.iter()
        .map(|t| {
            let mut c = t.clone();
            c.data_mut().iter_mut().for_each(|v| *v /= factor);
            c
        })
        .collect()
}

/// Clipped (or raw, for `clip = None`) per-example gradients summed in 64-bit,
/// plus lot statistics. Summation runs in example order, so the result does not
/// depend on the thread count.
pub(crate) struct LotSum {
    pub sum: Grads<f64>,
    pub loss: f64,
    pub pre_clip_mean: f64,
    pub pre_clip_max: f64,
}

pub(crate) fn lot_sum<T: Scalar>(model: &ModelState<T>, batch: &Batch<T>, clip: Option<f64>) -> Result<LotSum> {
    let (s, d) = batch.inputs.dims2()?;
    let mut sum: Grads<f64> = model.params().map(|p| Tensor::zeros(p.shape())).collect();
    let (mut loss, mut norm_sum, mut norm_max) = (0.0, 0.0, 0.0f64);
    for start in (0..s).step_by(CHUNK) {
        let end = (start + CHUNK).min(s);
        let inputs = Tensor::new(vec![end - start, d], batch.inputs.data()[start * d..end * d].to_vec())?;
        let chunk = Batch::new(inputs, batch.labels[start..end].to_vec(), model.num_classes())?;
        let per = model.per_example_backward(&chunk)?;
        for (g, l) in per.per_example.iter().zip(&per.loss_values) {
            let g64: Grads<f64> = g.iter().map(Tensor::cast).collect();
            let norm = grads_norm(&g64);
            norm_sum += norm;
            norm_max = norm_max.max(norm);
            loss += l.as_f64();
            let contribution = match clip {
                Some(cp) => clip_gradient(&g64, cp),
                None => g64,
            };
            for (acc, c) in sum.iter_mut().zip(&contribution) {
                acc.add_assign(c)?;
            }
        }
    }
    Ok(LotSum {
        sum,
        loss: loss / s as f64,
        pre_clip_mean: norm_sum / s as f64,
        pre_clip_max: norm_max,
    })
}

/// `θ ← θ − η (sum + noise) / denom`.
fn finish<T: Scalar>(
    model: &ModelState<T>,
    mut sum: Grads<f64>,
    noise: Option<Grads<f64>>,
    denom: f64,
    eta: f64,
) -> Result<(ModelState<T>, f64)> {
    let mut energy = 0.0;
    if let Some(noise) = noise {
        for (acc, n) in sum.iter_mut().zip(&noise) {
            energy += n.sq_norm();
            acc.add_assign(n)?;
        }
    }
    let inv = 1.0 / denom;
    let update: Grads<T> = sum.iter().map(|t| t.scaled(inv).cast()).collect();
    let mut next = model.clone();
    next.apply_update(&update, T::of(eta))?;
    Ok((next, energy))
}

fn record(lot: &LotSum, energy: f64, rho: Option<f64>) -> StepRecord {
    StepRecord {
        step: 0,
        loss: lot.loss,
        acc: None,
        pre_clip_mean: lot.pre_clip_mean,
        pre_clip_max: lot.pre_clip_max,
        noise_energy: energy,
        rho_step: rho,
        elapsed_ms: 0,
    }
}

fn denominator<T>(batch: &Batch<T>, denom: Option<f64>) -> f64 {
    denom.unwrap_or(batch.labels.len() as f64)
}

/// Plain SGD on the mean raw gradient of the lot.
pub fn sgd_lot_step<T: Scalar>(
    model: &ModelState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
) -> Result<(ModelState<T>, StepRecord)> {
    sgd_lot_step_with(model, batch, cfg, None)
}

pub(crate) fn sgd_lot_step_with<T: Scalar>(
    model: &ModelState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    denom: Option<f64>,
) -> Result<(ModelState<T>, StepRecord)> {
    let mut lot = lot_sum(model, batch, None)?;
    let (next, _) = finish(
        model,
        std::mem::take(&mut lot.sum),
        None,
        denominator(batch, denom),
        cfg.eta,
    )?;
    Ok((next, record(&lot, 0.0, None)))
}

/// Baseline DP-SGD: clip each example, sum, add `N(0, (sigma clip)² I)`, divide by the lot size.
pub fn dp_sgd_step<T: Scalar>(
    model: &ModelState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<(ModelState<T>, StepRecord)> {
    dp_sgd_step_with(model, batch, cfg, rng, None)
}

pub(crate) fn dp_sgd_step_with<T: Scalar>(
    model: &ModelState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    rng: &mut RngState,
    denom: Option<f64>,
) -> Result<(ModelState<T>, StepRecord)> {
    if cfg.optimizer != OptimizerKind::DpSgd {
        return Err(Error::validation("dp_sgd_step requires the dp-sgd optimizer"));
    }
    let mut lot = lot_sum(model, batch, Some(cfg.clip))?;
    let noise = if cfg.sigma > 0.0 {
        let std = cfg.noise_std();
        Some(
            model
                .params()
                .map(|p| gauss_sample::<f64>(rng, p.shape(), 0.0, std))
                .collect::<Result<Grads<f64>>>()?,
        )
    } else {
        None
    };
    let (next, energy) = finish(
        model,
        std::mem::take(&mut lot.sum),
        noise,
        denominator(batch, denom),
        cfg.eta,
    )?;
    let rho = crate::accountant::step_rho(cfg.effective_multiplier(), cfg.clip).ok();
    Ok((next, record(&lot, energy, rho)))
}

/// DP-Hero step: clip, sum, add per-layer guided noise `clip * B diag(v) N`, divide by the lot size.
pub fn dp_hero_step<T: Scalar>(
    model: &ModelState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    rng: &mut RngState,
    guidance: &NoiseGuidance<T>,
) -> Result<(ModelState<T>, StepRecord)> {
    dp_hero_step_with(model, batch, cfg, rng, guidance, None)
}

pub(crate) fn dp_hero_step_with<T: Scalar>(
    model: &ModelState<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    rng: &mut RngState,
    guidance: &NoiseGuidance<T>,
    denom: Option<f64>,
) -> Result<(ModelState<T>, StepRecord)> {
    if cfg.optimizer != OptimizerKind::DpHero {
        return Err(Error::validation("dp_hero_step requires the dp-hero optimizer"));
    }
    guidance.check_model(model)?;
    if (guidance.sigma - cfg.sigma).abs() > 0.0 {
        return Err(Error::validation(format!(
            "guidance computed for sigma {} but config has sigma {}",
            guidance.sigma, cfg.sigma
        )));
    }
    let mut lot = lot_sum(model, batch, Some(cfg.clip))?;
    let noise = if cfg.sigma > 0.0 {
        let scale = if cfg.noise_clip_coupling { cfg.clip } else { 1.0 };
        let n = guidance.sample_noise(rng, T::of(scale))?;
        Some(n.iter().map(Tensor::cast).collect())
    } else {
        None
    };
    let (next, energy) = finish(
        model,
        std::mem::take(&mut lot.sum),
        noise,
        denominator(batch, denom),
        cfg.eta,
    )?;
    let rho = crate::accountant::step_rho(cfg.effective_multiplier(), cfg.clip).ok();
    Ok((next, record(&lot, energy, rho)))
}
