//! SGD with classic momentum.

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;
use alloc::format;

/// One SGDM update: velocity <- momentum * velocity + grad,
/// param <- param - lr * velocity.
pub fn sgdm_step<T: Float>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    velocity: &mut Tensor<T>,
    lr: T,
    momentum: T,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::ShapeMismatch {
            op: "sgdm_step",
            detail: format!(
                "param {:?}, grad {:?}, velocity {:?}",
                param.shape(),
                grad.shape(),
                velocity.shape()
            ),
        });
    }
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + *g;
        *p -= lr * *v;
    }
    Ok(())
}
