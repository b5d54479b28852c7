//! Primitive neural operators: convolution, batch normalization,
//! activations, pooling, fully-connected layers and the classification loss.
//!
//! Every forward operator has a matching backward kernel used by
//! [`crate::autodiff`].

mod activation;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar};
pub use conv::{
    conv2d, conv2d_backward, conv2d_direct, conv_output_size, Conv2dParams, ConvGeometry,
};
pub use linear::{fully_connected, fully_connected_backward};
pub use loss::{softmax, softmax_cross_entropy, softmax_cross_entropy_backward};
pub use norm::{
    batch_norm, batch_norm_eval, batch_norm_eval_backward, batch_norm_train,
    batch_norm_train_backward, blend_running_stats, update_running_stats, BatchNormParams,
    BatchStats, Mode, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
pub use pool::{
    avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward, max_pool2d,
    max_pool2d_backward, PoolGeometry,
};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Multiplies each `(n, c)` plane of `x` by `scale[n, c]`; `scale` is
/// `(N, C, 1, 1)`.
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    check_scale(x, scale)?;
    let plane = x.spatial();
    let mut out = x.clone();
    for (dst, &s) in out.data_mut().chunks_mut(plane.max(1)).zip(scale.data()) {
        for v in dst {
            *v = *v * s;
        }
    }
    Ok(out)
}

/// Returns `(dx, dscale)`.
pub fn channel_scale_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_scale(x, scale)?;
    x.expect_same_shape(grad_out)?;
    let dx = channel_scale(grad_out, scale)?;
    let plane = x.spatial();
    let mut ds = Tensor::zeros(scale.shape());
    for ((d, xs), gs) in ds
        .data_mut()
        .iter_mut()
        .zip(x.data().chunks(plane.max(1)))
        .zip(grad_out.data().chunks(plane.max(1)))
    {
        *d = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
    }
    Ok((dx, ds))
}

fn check_scale<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<()> {
    if scale.shape() != [x.batch(), x.channels(), 1, 1] {
        return Err(Error::shape(format!(
            "channel scale {:?} for input {:?}",
            scale.shape(),
            x.shape()
        )));
    }
    Ok(())
}
