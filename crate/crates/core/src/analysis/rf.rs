use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::nnops::Mode;
use crate::res2net::{
    block_param_layout, res2net_block_forward, set_bn_identity, Graph, ParamKind, ParamStore,
    Res2NetBlockConfig,
};
use crate::tensor::Tensor;

/// Receptive field of one pre-concatenation split, within the block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitField {
    /// 1-based split index.
    pub split: usize,
    /// Theoretical side length.
    pub theory: usize,
    /// Measured `(height, width)` of the input-gradient support.
    pub measured: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceptiveFieldProfile {
    pub scale: usize,
    pub splits: Vec<SplitField>,
}

impl ReceptiveFieldProfile {
    /// Distinct theoretical side lengths, ascending.
    pub fn sides(&self) -> Vec<usize> {
        self.splits
            .iter()
            .map(|s| s.theory)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// True when every split was measured and matches its theoretical box.
    pub fn agrees(&self) -> bool {
        self.splits
            .iter()
            .all(|s| s.measured == Some((s.theory, s.theory)))
    }
}

impl fmt::Display for ReceptiveFieldProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split  theory  measured")?;
        for s in &self.splits {
            let m = match s.measured {
                Some((h, w)) => format!("{h}x{w}"),
                None => "-".to_string(),
            };
            writeln!(f, "{:>5}  {:>4}x{:<1}  {m}", s.split, s.theory, s.theory)?;
        }
        let sides: Vec<String> = self.sides().iter().map(|s| s.to_string()).collect();
        write!(f, "sides {{{}}}", sides.join(", "))
    }
}

/// Theoretical receptive-field side of each split inside a block, ignoring
/// the 1×1 convolutions and the shortcut.
///
/// In the hierarchical form split 1 passes through (side 1) and split `i ≥ 2`
/// has seen `i − 1` chained 3×3 convolutions (side `2(i−1)+1`). In the
/// parallel form every convolved split has side 3; a strided block pools
/// split 1 with a 3×3 window. `s = 1` is a single 3×3 convolution.
pub fn enumerate_receptive_fields(cfg: &Res2NetBlockConfig) -> ReceptiveFieldProfile {
    let splits = if cfg.scale == 1 {
        vec![SplitField {
            split: 1,
            theory: 3,
            measured: None,
        }]
    } else {
        (1..=cfg.scale)
            .map(|i| {
                let theory = match (i, cfg.uses_hierarchy()) {
                    (1, _) => {
                        if cfg.stride == 1 {
                            1
                        } else {
                            3
                        }
                    }
                    (_, true) => 2 * (i - 1) + 1,
                    (_, false) => 3,
                };
                SplitField {
                    split: i,
                    theory,
                    measured: None,
                }
            })
            .collect()
    };
    ReceptiveFieldProfile {
        scale: cfg.scale,
        splits,
    }
}

/// Block parameters satisfying the oracle's precondition: convolution
/// weights drawn from `[0.05, 1)` and identity batch norms.
pub fn positive_block_params(
    cfg: &Res2NetBlockConfig,
    prefix: &str,
    seed: u64,
) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(0.05f32, 1.0);
    let mut store = ParamStore::new();
    for slot in block_param_layout(cfg, prefix) {
        let t = match slot.kind() {
            ParamKind::ConvWeight | ParamKind::FcWeight => {
                Tensor::from_fn(slot.shape, |_, _, _, _| dist.sample(&mut rng))
            }
            _ => Tensor::zeros(slot.shape),
        };
        store.insert(slot.name, t);
    }
    set_bn_identity(&mut store, prefix);
    Ok(store)
}

/// Measures each split's receptive field as the bounding box of the nonzero
/// input gradient of its center output element, on a `size × size` input.
///
/// Requires stride 1 and strictly positive convolution weights so that no
/// contributions cancel. Batch norms are replaced by the identity and SE is
/// ignored (it acts after the concatenation).
pub fn rf_oracle(
    cfg: &Res2NetBlockConfig,
    params: &ParamStore<f32>,
    prefix: &str,
    size: usize,
) -> Result<ReceptiveFieldProfile> {
    cfg.validate()?;
    if cfg.stride != 1 {
        return Err(Error::PreconditionViolation(
            "receptive fields are measured at stride 1".into(),
        ));
    }
    let mut profile = enumerate_receptive_fields(cfg);
    let largest = profile.sides().last().copied().unwrap_or(1);
    if size < largest {
        return Err(Error::PreconditionViolation(format!(
            "input side {size} is smaller than the largest field {largest}"
        )));
    }
    let mut store = params.cast::<f64>();
    for (name, t) in store.iter() {
        if name.starts_with(prefix)
            && ParamKind::of(name) == ParamKind::ConvWeight
            && t.data().iter().any(|&v| v <= 0.0)
        {
            return Err(Error::PreconditionViolation(format!(
                "{name} has a non-positive weight"
            )));
        }
    }
    set_bn_identity(&mut store, prefix);
    let plain = cfg.with_se(false);
    let center = size / 2;
    let x0 = Tensor::<f64>::from_fn([1, cfg.in_channels, size, size], |_, c, h, w| {
        1.0 + 0.01 * ((c + 2 * h + 3 * w) % 7) as f64
    });
    for field in &mut profile.splits {
        let mut g = Graph::new(&store, Mode::Eval).with_bn_epsilon(0.0);
        let x = g.input(x0.clone());
        let trace = res2net_block_forward(&mut g, x, &plain, prefix)?;
        let y = trace.outputs[field.split - 1];
        let mut probe = Tensor::zeros(g.value(y).shape());
        probe.set(0, 0, center, center, 1.0);
        let loss = g.tape.weighted_sum(y, probe)?;
        let grads = g.tape.backward(loss)?;
        field.measured = support_box(&grads.wrt(x));
    }
    Ok(profile)
}

/// `(height, width)` of the bounding box of nonzero entries over all
/// channels, or `None` if everything is zero.
pub fn support_box(t: &Tensor<f64>) -> Option<(usize, usize)> {
    let [n, c, h, w] = t.shape();
    let (mut h0, mut h1, mut w0, mut w1) = (usize::MAX, 0, usize::MAX, 0);
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    if t.at(ni, ci, hi, wi) != 0.0 {
                        h0 = h0.min(hi);
                        h1 = h1.max(hi);
                        w0 = w0.min(wi);
                        w1 = w1.max(wi);
                    }
                }
            }
        }
    }
    (h0 != usize::MAX).then(|| (h1 - h0 + 1, w1 - w0 + 1))
}
