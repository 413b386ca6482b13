//! Training loops: plain SGD, DP-SGD and DP-Hero SGD.
//!
//! Every optimizer shares one code path: per-example gradients are clipped
//! (except for plain SGD), summed in `f64` in example order, optionally
//! noised, divided by the lot size and applied. With `sigma = 0` and a clip
//! bound that is never reached, the three optimizers therefore produce
//! bit-identical trajectories.

mod config;
mod steps;
mod train;

pub use config::{OptimizerKind, TrainConfig};
pub use steps::{clip_gradient, dp_hero_step, dp_sgd_step, sgd_lot_step, StepRecord};
pub use train::{
    planned_steps, train, train_from, EvalPoint, TrainOutcome, STREAM_INIT, STREAM_LOTS, STREAM_NOISE, TRACE_STEPS,
};

/// Clipped per-example gradients of `batch` summed in `f64`.
pub(crate) fn lot_sum_for_diagnostics<T: crate::Scalar>(
    model: &crate::nn::ModelState<T>,
    batch: &crate::nn::Batch<T>,
    clip: f64,
) -> crate::Result<Vec<crate::numerics::Tensor<f64>>> {
    Ok(steps::lot_sum(model, batch, Some(clip))?.sum)
}
