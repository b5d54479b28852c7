//! The Res2Net block, its SE and grouped variants, the bottleneck baseline
//! and whole-network templates.

mod block;
mod config;
mod graph;
mod network;
mod params;

pub use block::{
    block_param_layout, bottleneck_forward, res2net_block_forward, se_apply, BlockTrace,
};
pub use config::{Res2NetBlockConfig, DEFAULT_SE_RATIO};
pub use graph::Graph;
pub use network::{
    block_name, build_network, build_network_with_params, NetworkSpec, StageSpec, StemSpec,
    Template,
};
pub use params::{init_params, ParamKind, ParamSlot, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, random_tensor, GradCheckReport};
use crate::error::Result;
use crate::nnops::{conv_output_size, Mode};
use crate::tensor::{Scalar, Tensor};

/// A `(c_out, c_in_per_group, 3, 3)` kernel with a 1 at the center of each
/// output channel's matching input channel and 0 elsewhere. With
/// `c_in_per_group == c_out / groups` the convolution is the identity.
pub fn delta_kernel<T: Scalar>(c_out: usize, c_in_per_group: usize) -> Tensor<T> {
    Tensor::from_fn([c_out, c_in_per_group, 3, 3], |o, i, h, w| {
        if i == o % c_in_per_group && h == 1 && w == 1 {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Sets every batch norm under `prefix` (or all, for `""`) to the identity
/// map: gamma 1, beta 0, running mean 0, running variance 1. Evaluate with
/// BN epsilon 0 for an exact identity.
pub fn set_bn_identity<T: Scalar>(store: &mut ParamStore<T>, prefix: &str) {
    for (name, t) in store.iter_mut() {
        if !name.starts_with(prefix) {
            continue;
        }
        let value = match ParamKind::of(name) {
            ParamKind::BnGamma | ParamKind::RunningVar => T::one(),
            ParamKind::BnBeta | ParamKind::RunningMean => T::zero(),
            _ => continue,
        };
        t.data_mut().iter_mut().for_each(|v| *v = value);
    }
}

/// Initialized parameters for a single block under `prefix`.
pub fn init_block_params(
    cfg: &Res2NetBlockConfig,
    prefix: &str,
    seed: u64,
) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    Ok(init_params(&block_param_layout(cfg, prefix), seed))
}

/// Finite-difference check of a whole block in train mode (binary64) with
/// respect to its input and every trainable parameter. The input is
/// `2 × in_channels × 5 × 5`; BN affine parameters are drawn away from their
/// initial values so no gradient is trivially structured.
pub fn check_block_gradients(
    cfg: &Res2NetBlockConfig,
    epsilon: f64,
    threshold: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    const PREFIX: &str = "b";
    const SIDE: usize = 5;
    let init = init_block_params(cfg, PREFIX, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![(
        "x".to_string(),
        random_tensor([2, cfg.in_channels, SIDE, SIDE], -1.0, 1.0, &mut rng),
    )];
    for (name, t) in init.iter() {
        let t = match ParamKind::of(name) {
            ParamKind::BnGamma => random_tensor(t.shape(), 0.5, 1.5, &mut rng),
            ParamKind::BnBeta | ParamKind::FcBias => random_tensor(t.shape(), -0.5, 0.5, &mut rng),
            k if k.trainable() => t.cast(),
            _ => continue,
        };
        inputs.push((name.to_string(), t));
    }
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let side = conv_output_size(SIDE, 3, cfg.stride, 1).unwrap_or(1);
    let coeffs = random_tensor([2, cfg.out_channels, side, side], -1.0, 1.0, &mut rng);
    let unused = ParamStore::<f64>::new();
    grad_check(
        &inputs,
        |tape, vars| {
            let mut g = Graph::from_tape(std::mem::take(tape), &unused, Mode::Train);
            for (name, &v) in names.iter().zip(vars).skip(1) {
                g.bind(name.clone(), v);
            }
            let out = res2net_block_forward(&mut g, vars[0], cfg, PREFIX)
                .and_then(|t| g.tape.weighted_sum(t.output, coeffs.clone()));
            *tape = g.into_tape();
            out
        },
        epsilon,
        threshold,
        seed,
    )
}
