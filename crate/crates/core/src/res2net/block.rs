//! Residual blocks: the Res2Net block, its SE stage and the bottleneck
//! baseline.
//!
//! Parameter names inside a block with prefix `P`:
//!
//! | layer                 | names                                  |
//! |-----------------------|----------------------------------------|
//! | 1×1 reduce (in → n)   | `P.reduce.conv.weight`, `P.reduce.bn.*` |
//! | split `i` 3×3 (i ≥ 2) | `P.k{i}.conv.weight`, `P.k{i}.bn.*`     |
//! | bottleneck 3×3        | `P.mid.conv.weight`, `P.mid.bn.*`       |
//! | 1×1 expand (n → out)  | `P.expand.conv.weight`, `P.expand.bn.*` |
//! | SE                    | `P.se.fc1.{weight,bias}`, `P.se.fc2.*`  |
//! | projection shortcut   | `P.shortcut.conv.weight`, `P.shortcut.bn.*` |

use super::config::Res2NetBlockConfig;
use super::graph::Graph;
use super::params::ParamSlot;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nnops::{ConvGeometry, PoolGeometry};
use crate::tensor::Scalar;

/// Intermediate values of one block evaluation.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub output: Var,
    /// `x_1 … x_s`, the splits of the reduced features.
    pub splits: Vec<Var>,
    /// `y_1 … y_s`, the per-split results fed to the concatenation.
    pub outputs: Vec<Var>,
}

const POINTWISE: ConvGeometry = ConvGeometry::new(1, 0, 1);

fn pointwise_strided(stride: usize) -> ConvGeometry {
    ConvGeometry::new(stride, 0, 1)
}

fn bn_slots(prefix: &str, c: usize) -> Vec<ParamSlot> {
    ["gamma", "beta", "running_mean", "running_var"]
        .iter()
        .map(|s| ParamSlot::new(format!("{prefix}.bn.{s}"), [c, 1, 1, 1]))
        .collect()
}

fn conv_bn_slots(prefix: &str, c_out: usize, c_in_per_group: usize, k: usize) -> Vec<ParamSlot> {
    let mut v = vec![ParamSlot::new(
        format!("{prefix}.conv.weight"),
        [c_out, c_in_per_group, k, k],
    )];
    v.extend(bn_slots(prefix, c_out));
    v
}

/// Every tensor a block owns, in a stable order.
pub fn block_param_layout(cfg: &Res2NetBlockConfig, prefix: &str) -> Vec<ParamSlot> {
    let n = cfg.internal_channels();
    let mut slots = conv_bn_slots(&format!("{prefix}.reduce"), n, cfg.in_channels, 1);
    if cfg.scale == 1 {
        slots.extend(conv_bn_slots(
            &format!("{prefix}.mid"),
            n,
            n / cfg.cardinality,
            3,
        ));
    } else {
        for i in 2..=cfg.scale {
            slots.extend(conv_bn_slots(
                &format!("{prefix}.k{i}"),
                cfg.width,
                cfg.width / cfg.cardinality,
                3,
            ));
        }
    }
    slots.extend(conv_bn_slots(
        &format!("{prefix}.expand"),
        cfg.out_channels,
        n,
        1,
    ));
    if cfg.use_se {
        let (c, h) = (cfg.out_channels, cfg.se_hidden());
        slots.push(ParamSlot::new(
            format!("{prefix}.se.fc1.weight"),
            [h, c, 1, 1],
        ));
        slots.push(ParamSlot::new(
            format!("{prefix}.se.fc1.bias"),
            [h, 1, 1, 1],
        ));
        slots.push(ParamSlot::new(
            format!("{prefix}.se.fc2.weight"),
            [c, h, 1, 1],
        ));
        slots.push(ParamSlot::new(
            format!("{prefix}.se.fc2.bias"),
            [c, 1, 1, 1],
        ));
    }
    if cfg.needs_projection() {
        slots.extend(conv_bn_slots(
            &format!("{prefix}.shortcut"),
            cfg.out_channels,
            cfg.in_channels,
            1,
        ));
    }
    slots
}

fn check_input<T: Scalar>(g: &Graph<T>, x: Var, cfg: &Res2NetBlockConfig) -> Result<()> {
    cfg.validate()?;
    let c = g.value(x).channels();
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "block expects {} input channels, got {c}",
            cfg.in_channels
        )));
    }
    Ok(())
}

/// Squeeze-and-excitation: `u · sigmoid(fc2(relu(fc1(gap(u)))))` per channel.
pub fn se_apply<T: Scalar>(g: &mut Graph<T>, u: Var, prefix: &str) -> Result<Var> {
    let z = g.tape.global_avg_pool(u)?;
    let h = g.linear(&format!("{prefix}.fc1"), z)?;
    let h = g.tape.relu(h);
    let e = g.linear(&format!("{prefix}.fc2"), h)?;
    let e = g.tape.sigmoid(e);
    g.tape.channel_scale(u, e)
}

/// Expand, optional SE, shortcut add and final ReLU.
fn finish_block<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    merged: Var,
    cfg: &Res2NetBlockConfig,
    prefix: &str,
) -> Result<Var> {
    let mut out = g.conv_bn(&format!("{prefix}.expand"), merged, POINTWISE, false)?;
    if cfg.use_se {
        out = se_apply(g, out, &format!("{prefix}.se"))?;
    }
    let shortcut = if cfg.needs_projection() {
        g.conv_bn(
            &format!("{prefix}.shortcut"),
            x,
            pointwise_strided(cfg.stride),
            false,
        )?
    } else {
        x
    };
    let sum = g.tape.add(out, shortcut)?;
    Ok(g.tape.relu(sum))
}

/// 1×1 reduce → 3×3 (grouped) → 1×1 expand with an identity or projection
/// shortcut.
pub fn bottleneck_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &Res2NetBlockConfig,
    prefix: &str,
) -> Result<BlockTrace> {
    check_input(g, x, cfg)?;
    let h = g.conv_bn(&format!("{prefix}.reduce"), x, POINTWISE, true)?;
    let mid = g.conv_bn(
        &format!("{prefix}.mid"),
        h,
        ConvGeometry::new(cfg.stride, 1, cfg.cardinality),
        true,
    )?;
    let output = finish_block(g, x, mid, cfg, prefix)?;
    Ok(BlockTrace {
        output,
        splits: vec![h],
        outputs: vec![mid],
    })
}

/// The hierarchical multi-scale block.
///
/// After the 1×1 reduction the features are split into `s` groups;
/// `y_1 = x_1`, `y_2 = K_2(x_2)` and `y_i = K_i(x_i + y_{i-1})` for
/// `2 < i ≤ s`, where each `K_i` is a 3×3 convolution with BN and ReLU. In a
/// strided block every `K_i` sees only its own split and `x_1` is
/// downsampled by a 3×3 average pool instead. With `s = 1` this is exactly
/// [`bottleneck_forward`].
pub fn res2net_block_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    cfg: &Res2NetBlockConfig,
    prefix: &str,
) -> Result<BlockTrace> {
    if cfg.scale == 1 {
        return bottleneck_forward(g, x, cfg, prefix);
    }
    check_input(g, x, cfg)?;
    let h = g.conv_bn(&format!("{prefix}.reduce"), x, POINTWISE, true)?;
    let splits = g.tape.split_channels(h, cfg.scale)?;
    let hierarchical = cfg.uses_hierarchy();
    let k_geo = ConvGeometry::new(cfg.stride, 1, cfg.cardinality);

    let mut outputs = Vec::with_capacity(cfg.scale);
    outputs.push(if cfg.stride == 1 {
        splits[0]
    } else {
        g.tape
            .avg_pool2d(splits[0], PoolGeometry::new(3, cfg.stride, 1))?
    });
    for i in 2..=cfg.scale {
        let xi = splits[i - 1];
        let input = if hierarchical && i > 2 {
            let prev = outputs[i - 2];
            g.tape.add(xi, prev)?
        } else {
            xi
        };
        outputs.push(g.conv_bn(&format!("{prefix}.k{i}"), input, k_geo, true)?);
    }
    let merged = g.tape.concat_channels(&outputs)?;
    let output = finish_block(g, x, merged, cfg, prefix)?;
    Ok(BlockTrace {
        output,
        splits,
        outputs,
    })
}
