use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accountant::{PrivacyLedger, PrivacyStep};
use crate::data::{Dataset, LotSampler, SamplingMode};
use crate::dp_optim::steps::{dp_hero_step_with, dp_sgd_step_with, sgd_lot_step_with};
use crate::dp_optim::{OptimizerKind, StepRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::guidance::{compute_guidance, NoiseGuidance};
use crate::nn::{evaluate, init_model, ModelState};
use crate::numerics::RngState;
use crate::scalar::Scalar;

/// Substream labels derived from the run's root RNG.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_LOTS: u64 = 2;
pub const STREAM_NOISE: u64 = 3;

/// Number of leading steps evaluated individually under `trace_initial`.
pub const TRACE_STEPS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Completed epochs (fractional for trace checkpoints).
    pub epoch: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: ModelState<T>,
    pub records: Vec<StepRecord>,
    pub ledger: PrivacyLedger,
    pub evals: Vec<EvalPoint>,
}

/// Steps a run will execute on `n` examples.
pub fn planned_steps(cfg: &TrainConfig, n: usize) -> usize {
    cfg.steps
        .unwrap_or_else(|| cfg.epochs * n.div_ceil(cfg.lot_size.max(1)))
}

fn check_data<T: Scalar>(cfg: &TrainConfig, dataset: &Dataset<T>) -> Result<()> {
    if dataset.input_dim() != cfg.arch.input_len() {
        return Err(Error::validation(format!(
            "dataset examples have {} features but the architecture expects {}",
            dataset.input_dim(),
            cfg.arch.input_len()
        )));
    }
    if dataset.num_classes() != cfg.arch.num_classes {
        return Err(Error::validation(format!(
            "dataset has {} classes but the architecture outputs {}",
            dataset.num_classes(),
            cfg.arch.num_classes
        )));
    }
    Ok(())
}

/// Initializes a model from `rng` and trains it.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    dataset: &Dataset<T>,
    eval: Option<&Dataset<T>>,
    rng: &RngState,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_data(cfg, dataset)?;
    let model = init_model(&cfg.arch, &mut rng.derive(&[STREAM_INIT]))?;
    train_from(cfg, model, dataset, eval, rng)
}

/// Trains an existing model. Lots and noise use independent substreams of `rng`,
/// so changing `sigma` never shifts the lot sequence.
pub fn train_from<T: Scalar>(
    cfg: &TrainConfig,
    mut model: ModelState<T>,
    dataset: &Dataset<T>,
    eval: Option<&Dataset<T>>,
    rng: &RngState,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_data(cfg, dataset)?;
    if model.arch() != &cfg.arch {
        return Err(Error::validation("model architecture differs from the configured one"));
    }
    let mut ledger = PrivacyLedger::new(cfg.delta, cfg.accounting)?;
    let total = planned_steps(cfg, dataset.len());
    let mut outcome_records = Vec::with_capacity(total);
    let mut evals = Vec::new();
    if total == 0 {
        return Ok(TrainOutcome {
            model,
            records: outcome_records,
            ledger,
            evals,
        });
    }

    let mut sampler = LotSampler::new(dataset.len(), cfg.lot_size, cfg.sampling, rng.derive(&[STREAM_LOTS]))?;
    let mut noise_rng = rng.derive(&[STREAM_NOISE]);
    let per_epoch = sampler.steps_per_epoch();
    let q = sampler.rate();
    let denom = match cfg.sampling {
        SamplingMode::Shuffle => None,
        SamplingMode::Poisson => Some(cfg.lot_size as f64),
    };
    let start = Instant::now();
    let mut guidance: Option<NoiseGuidance<T>> = None;

    for t in 0..total {
        let batch = dataset.batch(&sampler.next_indices()?)?;
        let (next, mut rec) = match cfg.optimizer {
            OptimizerKind::Sgd => {
                ledger.push(PrivacyStep::unprotected(cfg.clip, q));
                sgd_lot_step_with(&model, &batch, cfg, denom)?
            }
            OptimizerKind::DpSgd => {
                ledger.push(PrivacyStep::gaussian(cfg.effective_multiplier(), cfg.clip, q));
                dp_sgd_step_with(&model, &batch, cfg, &mut noise_rng, denom)?
            }
            OptimizerKind::DpHero => {
                if guidance.is_none() || t % cfg.guidance_every == 0 {
                    guidance = Some(compute_guidance(&model, cfg.sigma, cfg.guidance_scope)?);
                }
                let g = guidance.as_ref().expect("guidance computed above");
                ledger.push(PrivacyStep::guided(
                    cfg.effective_multiplier(),
                    cfg.clip,
                    q,
                    g.min_scale_ratio(),
                ));
                dp_hero_step_with(&model, &batch, cfg, &mut noise_rng, g, denom)?
            }
        };
        model = next;
        rec.step = t + 1;

        let epoch_end = (t + 1) % per_epoch == 0 || t + 1 == total;
        let traced = cfg.trace_initial && t < TRACE_STEPS;
        if let Some(eval) = eval.filter(|_| epoch_end || traced) {
            let accuracy = evaluate(&model, eval)?;
            rec.acc = Some(accuracy);
            evals.push(EvalPoint {
                step: t + 1,
                epoch: (t + 1) as f64 / per_epoch as f64,
                accuracy,
            });
        }
        if cfg.timing {
            rec.elapsed_ms = start.elapsed().as_millis() as u64;
        }
        outcome_records.push(rec);
    }

    Ok(TrainOutcome {
        model,
        records: outcome_records,
        ledger,
        evals,
    })
}
