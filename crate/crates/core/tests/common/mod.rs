//! A deliberately plain scalar implementation of the multi-scale block,
//! shared by the integration tests. Everything is `f64`, index arithmetic is
//! spelled out, and nothing from the library's numeric code is used.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use res2net::res2net::{block_param_layout, ParamKind, ParamStore, Res2NetBlockConfig};
use res2net::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Dense `n × c × h × w` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Arr {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Arr {
            n,
            c,
            h,
            w,
            d: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_tensor<T: res2net::Scalar>(t: &Tensor<T>) -> Self {
        let [n, c, h, w] = t.shape();
        Arr {
            n,
            c,
            h,
            w,
            d: t.cast::<f64>().into_data(),
        }
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn put(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = ((n * self.c + c) * self.h + y) * self.w + x;
        self.d[i] = v;
    }
}

pub fn conv(x: &Arr, wt: &Arr, stride: usize, pad: usize, groups: usize) -> Arr {
    let k = wt.h;
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let cin_g = x.c / groups;
    let cout_g = wt.n / groups;
    let mut out = Arr::zeros(x.n, wt.n, ho, wo);
    for n in 0..x.n {
        for o in 0..wt.n {
            let g = o / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for i in 0..cin_g {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= x.h as i64 || ix >= x.w as i64 {
                                    continue;
                                }
                                s += wt.get(o, i, ky, kx)
                                    * x.get(n, g * cin_g + i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.put(n, o, oy, ox, s);
                }
            }
        }
    }
    out
}

pub fn relu(mut x: Arr) -> Arr {
    for v in &mut x.d {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    x
}

pub fn add(a: &Arr, b: &Arr) -> Arr {
    let mut out = a.clone();
    for (o, v) in out.d.iter_mut().zip(&b.d) {
        *o += v;
    }
    out
}

/// Train mode uses biased batch statistics; eval mode the stored ones.
pub fn bn(x: &Arr, p: &Params, prefix: &str, train: bool) -> Arr {
    let gamma = p.vec(&format!("{prefix}.gamma"));
    let beta = p.vec(&format!("{prefix}.beta"));
    let mut out = x.clone();
    for c in 0..x.c {
        let (mean, var) = if train {
            let mut vals = Vec::new();
            for n in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        vals.push(x.get(n, c, y, xx));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            (m, v)
        } else {
            (
                p.vec(&format!("{prefix}.running_mean"))[c],
                p.vec(&format!("{prefix}.running_var"))[c],
            )
        };
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let v = (x.get(n, c, y, xx) - mean) / (var + BN_EPS).sqrt();
                    out.put(n, c, y, xx, gamma[c] * v + beta[c]);
                }
            }
        }
    }
    out
}

pub fn channels(x: &Arr, start: usize, len: usize) -> Arr {
    let mut out = Arr::zeros(x.n, len, x.h, x.w);
    for n in 0..x.n {
        for c in 0..len {
            for y in 0..x.h {
                for xx in 0..x.w {
                    out.put(n, c, y, xx, x.get(n, start + c, y, xx));
                }
            }
        }
    }
    out
}

pub fn concat(parts: &[Arr]) -> Arr {
    let total = parts.iter().map(|p| p.c).sum();
    let f = &parts[0];
    let mut out = Arr::zeros(f.n, total, f.h, f.w);
    let mut base = 0;
    for p in parts {
        for n in 0..p.n {
            for c in 0..p.c {
                for y in 0..p.h {
                    for xx in 0..p.w {
                        out.put(n, base + c, y, xx, p.get(n, c, y, xx));
                    }
                }
            }
        }
        base += p.c;
    }
    out
}

/// 3×3 average with padding 1; padded zeros count towards the nine.
pub fn avg_pool3(x: &Arr, stride: usize) -> Arr {
    let ho = (x.h + 2 - 3) / stride + 1;
    let wo = (x.w + 2 - 3) / stride + 1;
    let mut out = Arr::zeros(x.n, x.c, ho, wo);
    for n in 0..x.n {
        for c in 0..x.c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as i64 - 1;
                            let ix = (ox * stride + kx) as i64 - 1;
                            if iy >= 0 && ix >= 0 && iy < x.h as i64 && ix < x.w as i64 {
                                s += x.get(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.put(n, c, oy, ox, s / 9.0);
                }
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn se(u: &Arr, p: &Params, prefix: &str) -> Arr {
    let w1 = p.arr(&format!("{prefix}.fc1.weight"));
    let b1 = p.vec(&format!("{prefix}.fc1.bias"));
    let w2 = p.arr(&format!("{prefix}.fc2.weight"));
    let b2 = p.vec(&format!("{prefix}.fc2.bias"));
    let mut out = u.clone();
    for n in 0..u.n {
        let mut z = vec![0.0; u.c];
        for (c, zc) in z.iter_mut().enumerate() {
            let mut s = 0.0;
            for y in 0..u.h {
                for x in 0..u.w {
                    s += u.get(n, c, y, x);
                }
            }
            *zc = s / (u.h * u.w) as f64;
        }
        let hidden: Vec<f64> = (0..w1.n)
            .map(|j| (b1[j] + (0..u.c).map(|c| w1.get(j, c, 0, 0) * z[c]).sum::<f64>()).max(0.0))
            .collect();
        for c in 0..u.c {
            let e = sigmoid(
                b2[c]
                    + (0..w1.n)
                        .map(|j| w2.get(c, j, 0, 0) * hidden[j])
                        .sum::<f64>(),
            );
            for y in 0..u.h {
                for x in 0..u.w {
                    out.put(n, c, y, x, u.get(n, c, y, x) * e);
                }
            }
        }
    }
    out
}

/// Named parameters as plain arrays.
pub struct Params<'a>(pub &'a ParamStore<f64>);

impl Params<'_> {
    pub fn arr(&self, name: &str) -> Arr {
        Arr::from_tensor(self.0.get(name).unwrap())
    }

    pub fn vec(&self, name: &str) -> Vec<f64> {
        self.0.get(name).unwrap().data().to_vec()
    }
}

fn conv_bn(
    x: &Arr,
    p: &Params,
    prefix: &str,
    stride: usize,
    pad: usize,
    groups: usize,
    train: bool,
) -> Arr {
    let y = conv(
        x,
        &p.arr(&format!("{prefix}.conv.weight")),
        stride,
        pad,
        groups,
    );
    bn(&y, p, &format!("{prefix}.bn"), train)
}

/// The block written out line by line.
pub fn block(
    x: &Arr,
    cfg: &Res2NetBlockConfig,
    store: &ParamStore<f64>,
    prefix: &str,
    train: bool,
) -> Arr {
    let p = Params(store);
    let st = cfg.stride;
    let r = relu(conv_bn(x, &p, &format!("{prefix}.reduce"), 1, 0, 1, train));
    let merged = if cfg.scale == 1 {
        relu(conv_bn(
            &r,
            &p,
            &format!("{prefix}.mid"),
            st,
            1,
            cfg.cardinality,
            train,
        ))
    } else {
        let w = cfg.width;
        let xs: Vec<Arr> = (0..cfg.scale).map(|i| channels(&r, i * w, w)).collect();
        let chained = st == 1 && cfg.hierarchical;
        let mut ys: Vec<Arr> = Vec::new();
        ys.push(if st == 1 {
            xs[0].clone()
        } else {
            avg_pool3(&xs[0], st)
        });
        for i in 2..=cfg.scale {
            let input = if chained && i > 2 {
                add(&xs[i - 1], &ys[i - 2])
            } else {
                xs[i - 1].clone()
            };
            ys.push(relu(conv_bn(
                &input,
                &p,
                &format!("{prefix}.k{i}"),
                st,
                1,
                cfg.cardinality,
                train,
            )));
        }
        concat(&ys)
    };
    let mut out = conv_bn(&merged, &p, &format!("{prefix}.expand"), 1, 0, 1, train);
    if cfg.use_se {
        out = se(&out, &p, &format!("{prefix}.se"));
    }
    let shortcut = if cfg.in_channels != cfg.out_channels || st != 1 {
        conv_bn(x, &p, &format!("{prefix}.shortcut"), st, 0, 1, train)
    } else {
        x.clone()
    };
    relu(add(&out, &shortcut))
}

/// A random valid block configuration.
pub fn random_config(rng: &mut ChaCha8Rng) -> Res2NetBlockConfig {
    let c = [1, 2, 4][rng.gen_range(0..3)];
    let width = c * rng.gen_range(1..=2);
    let scale = rng.gen_range(1..=6);
    let in_ch = [4, 8, 12][rng.gen_range(0..3)];
    let out_ch = if rng.gen_bool(0.4) {
        in_ch
    } else {
        [4, 8, 16][rng.gen_range(0..3)]
    };
    Res2NetBlockConfig::new(in_ch, out_ch, width, scale)
        .with_cardinality(c)
        .with_stride(if rng.gen_bool(0.3) { 2 } else { 1 })
        .with_se(rng.gen_bool(0.5))
        .with_se_ratio(4)
}

/// Every block tensor filled with seeded values; batch-norm statistics are
/// non-trivial and variances positive.
pub fn random_block_params(cfg: &Res2NetBlockConfig, prefix: &str, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for slot in block_param_layout(cfg, prefix) {
        let (lo, hi) = match slot.kind() {
            ParamKind::BnGamma => (0.5, 1.5),
            ParamKind::RunningVar => (0.2, 2.0),
            ParamKind::ConvWeight | ParamKind::FcWeight => (-0.5, 0.5),
            _ => (-0.3, 0.3),
        };
        let t = Tensor::from_fn(slot.shape, |_, _, _, _| rng.gen_range(lo..hi));
        store.insert(slot.name, t);
    }
    store
}

pub fn random_input(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Largest `|a − b| / max(|a|, |b|, 1e-8)` over all elements.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// `max |a − b| / max |b|`.
pub fn norm_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-30);
    diff / scale
}
