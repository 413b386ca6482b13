//! Small neural-network engine with per-example gradients.
//!
//! Supports dense, convolutional (stride 1, valid padding), ReLU and max-pool
//! layers trained with softmax cross-entropy.

mod arch;
mod model;

pub use arch::{Architecture, LayerSpec, ParamSpec};
pub use model::{
    argmax, evaluate, forward, init_model, per_example_backward, sgd_step, softmax_cross_entropy, Batch, Grads,
    ModelState, PerExampleGrads,
};

use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Global L2 norm over every tensor of a gradient list.
pub fn grads_norm<T: Scalar>(grads: &[Tensor<T>]) -> T {
    grads.iter().map(Tensor::sq_norm).sum::<T>().sqrt()
}

/// `acc += g`, tensor by tensor.
pub fn grads_add_assign<T: Scalar>(acc: &mut [Tensor<T>], g: &[Tensor<T>]) -> crate::Result<()> {
    if acc.len() != g.len() {
        return Err(crate::Error::Shape("gradient lists differ in length".into()));
    }
    for (a, b) in acc.iter_mut().zip(g) {
        a.add_assign(b)?;
    }
    Ok(())
}
