use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNormParams<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    /// Eval-mode parameters that reproduce the input exactly.
    pub fn identity(channels: usize) -> Self {
        Self {
            epsilon: 0.0,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Batch mean, biased variance and `1/sqrt(var + eps)` saved for backward.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: usize,
}

/// Normalizes `x` and, in train mode, folds the batch statistics into the
/// running estimates.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    p: &mut BatchNormParams<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    match mode {
        Mode::Train => {
            let (y, stats) = batch_norm_train(x, &p.gamma, &p.beta, p.epsilon)?;
            update_running_stats(p, &stats);
            Ok(y)
        }
        Mode::Eval => batch_norm_eval(
            x,
            &p.gamma,
            &p.beta,
            &p.running_mean,
            &p.running_var,
            p.epsilon,
        ),
    }
}

/// Exponential moving average with the unbiased batch variance.
pub fn update_running_stats<T: Scalar>(p: &mut BatchNormParams<T>, stats: &BatchStats<T>) {
    blend_running_stats(&mut p.running_mean, &mut p.running_var, stats, p.momentum);
}

/// [`update_running_stats`] on bare slices.
pub fn blend_running_stats<T: Scalar>(
    mean: &mut [T],
    var: &mut [T],
    stats: &BatchStats<T>,
    momentum: f64,
) {
    let m = T::lit(momentum);
    let keep = T::one() - m;
    let correction = if stats.count > 1 {
        T::lit(stats.count as f64 / (stats.count - 1) as f64)
    } else {
        T::one()
    };
    for c in 0..mean.len() {
        mean[c] = keep * mean[c] + m * stats.mean[c];
        var[c] = keep * var[c] + m * stats.var[c] * correction;
    }
}

fn check_vectors<T: Scalar>(x: &Tensor<T>, vecs: &[&[T]]) -> Result<()> {
    let c = x.channels();
    for v in vecs {
        if v.len() != c {
            return Err(Error::shape(format!(
                "batch norm parameter of length {} for {} channels",
                v.len(),
                c
            )));
        }
    }
    Ok(())
}

/// Sums `f(channel_index, value)` per channel in `(n, h, w)` order.
fn per_channel_sum<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(usize, usize, T) -> T + Sync + Send,
) -> Vec<T> {
    let [n, c, _, _] = x.shape();
    let plane = x.spatial();
    let data = x.data();
    par::map_indices(c, |ch| {
        let mut acc = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for (i, &v) in data[base..base + plane].iter().enumerate() {
                acc += f(ch, base + i, v);
            }
        }
        acc
    })
}

/// Applies `f(channel, flat_index, value)` elementwise.
fn map_planes<T: Scalar>(
    x: &Tensor<T>,
    f: impl Fn(usize, usize, T) -> T + Sync + Send,
) -> Tensor<T> {
    let c = x.channels();
    let plane = x.spatial();
    let src = x.data();
    let mut out = Tensor::zeros(x.shape());
    par::for_each_chunk(out.data_mut(), plane, |i, dst| {
        let ch = i % c;
        let base = i * plane;
        for (j, d) in dst.iter_mut().enumerate() {
            *d = f(ch, base + j, src[base + j]);
        }
    });
    out
}

pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    epsilon: f64,
) -> Result<(Tensor<T>, BatchStats<T>)> {
    check_vectors(x, &[gamma, beta])?;
    let count = x.batch() * x.spatial();
    if count == 0 {
        return Err(Error::shape("train-mode batch norm needs N·H·W ≥ 1"));
    }
    let inv_count = T::one() / T::lit(count as f64);
    let mean: Vec<T> = per_channel_sum(x, |_, _, v| v)
        .into_iter()
        .map(|s| s * inv_count)
        .collect();
    let var: Vec<T> = per_channel_sum(x, |c, _, v| (v - mean[c]) * (v - mean[c]))
        .into_iter()
        .map(|s| s * inv_count)
        .collect();
    let eps = T::lit(epsilon);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let y = map_planes(x, |c, _, v| {
        gamma[c] * ((v - mean[c]) * inv_std[c]) + beta[c]
    });
    Ok((
        y,
        BatchStats {
            mean,
            var,
            inv_std,
            count,
        },
    ))
}

pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    epsilon: f64,
) -> Result<Tensor<T>> {
    check_vectors(x, &[gamma, beta, mean, var])?;
    let eps = T::lit(epsilon);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    Ok(map_planes(x, |c, _, v| {
        gamma[c] * ((v - mean[c]) * inv_std[c]) + beta[c]
    }))
}

/// Gradients `(dx, dgamma, dbeta)` through the batch statistics.
pub fn batch_norm_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    stats: &BatchStats<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    x.expect_same_shape(grad_out)?;
    let g = grad_out.data();
    let xhat = |c: usize, v: T| (v - stats.mean[c]) * stats.inv_std[c];
    let dbeta = per_channel_sum(x, |_, i, _| g[i]);
    let dgamma = per_channel_sum(x, |c, i, v| g[i] * xhat(c, v));
    let m = T::lit(stats.count as f64);
    let dx = map_planes(x, |c, i, v| {
        let sum_dxhat = dbeta[c] * gamma[c];
        let sum_dxhat_xhat = dgamma[c] * gamma[c];
        stats.inv_std[c] / m * (m * g[i] * gamma[c] - sum_dxhat - xhat(c, v) * sum_dxhat_xhat)
    });
    Ok((dx, dgamma, dbeta))
}

pub fn batch_norm_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    mean: &[T],
    var: &[T],
    epsilon: f64,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    x.expect_same_shape(grad_out)?;
    let eps = T::lit(epsilon);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let g = grad_out.data();
    let dbeta = per_channel_sum(x, |_, i, _| g[i]);
    let dgamma = per_channel_sum(x, |c, i, v| g[i] * (v - mean[c]) * inv_std[c]);
    let dx = map_planes(x, |c, i, _| g[i] * gamma[c] * inv_std[c]);
    Ok((dx, dgamma, dbeta))
}
