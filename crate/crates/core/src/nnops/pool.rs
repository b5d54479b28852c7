use super::conv::conv_output_size;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// Per-channel spatial mean, shaped `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let plane = x.spatial();
    if plane == 0 {
        return Err(Error::EmptySpatial);
    }
    let inv = T::one() / T::lit(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new([x.batch(), x.channels(), 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let plane = x.spatial();
    if grad_out.shape() != [x.batch(), x.channels(), 1, 1] {
        return Err(Error::shape("global pool gradient shape"));
    }
    let inv = T::one() / T::lit(plane as f64);
    let mut out = Tensor::zeros(x.shape());
    for (dst, &g) in out.data_mut().chunks_mut(plane.max(1)).zip(grad_out.data()) {
        dst.fill(g * inv);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    fn output(&self, x: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || self.padding >= self.kernel {
            return Err(Error::shape(format!("invalid pooling geometry {self:?}")));
        }
        match (
            conv_output_size(x.height(), self.kernel, self.stride, self.padding),
            conv_output_size(x.width(), self.kernel, self.stride, self.padding),
        ) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(Error::shape(format!(
                "{}×{} input too small for {:?}",
                x.height(),
                x.width(),
                self
            ))),
        }
    }

    /// In-bounds input coordinates of window `(oh, ow)`.
    fn window(
        &self,
        oh: usize,
        ow: usize,
        h: usize,
        w: usize,
    ) -> impl Iterator<Item = (usize, usize)> {
        let k = self.kernel;
        let top = (oh * self.stride) as isize - self.padding as isize;
        let left = (ow * self.stride) as isize - self.padding as isize;
        (0..k).flat_map(move |kh| {
            (0..k).filter_map(move |kw| {
                let ih = top + kh as isize;
                let iw = left + kw as isize;
                (ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w)
                    .then_some((ih as usize, iw as usize))
            })
        })
    }
}

/// Window average; zero padding counts towards the divisor `k²`.
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, geo: PoolGeometry) -> Result<Tensor<T>> {
    let (ho, wo) = geo.output(x)?;
    let (h, w) = (x.height(), x.width());
    let inv = T::one() / T::lit((geo.kernel * geo.kernel) as f64);
    let src = x.data();
    let mut out = Tensor::zeros([x.batch(), x.channels(), ho, wo]);
    par::for_each_chunk(out.data_mut(), ho * wo, |plane, dst| {
        let input = &src[plane * h * w..(plane + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = T::zero();
                for (ih, iw) in geo.window(oh, ow, h, w) {
                    acc += input[ih * w + iw];
                }
                dst[oh * wo + ow] = acc * inv;
            }
        }
    });
    Ok(out)
}

pub fn avg_pool2d_backward<T: Scalar>(
    x: &Tensor<T>,
    geo: PoolGeometry,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (ho, wo) = geo.output(x)?;
    if grad_out.shape() != [x.batch(), x.channels(), ho, wo] {
        return Err(Error::shape("avg pool gradient shape"));
    }
    let (h, w) = (x.height(), x.width());
    let inv = T::one() / T::lit((geo.kernel * geo.kernel) as f64);
    let g = grad_out.data();
    let mut out = Tensor::zeros(x.shape());
    par::for_each_chunk(out.data_mut(), h * w, |plane, dst| {
        let gp = &g[plane * ho * wo..(plane + 1) * ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let v = gp[oh * wo + ow] * inv;
                for (ih, iw) in geo.window(oh, ow, h, w) {
                    dst[ih * w + iw] += v;
                }
            }
        }
    });
    Ok(out)
}

/// Window maximum; padding never wins. Also returns, per output element, the
/// flat input index that produced it (first maximum in scan order).
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, geo: PoolGeometry) -> Result<(Tensor<T>, Vec<usize>)> {
    let (ho, wo) = geo.output(x)?;
    let (h, w) = (x.height(), x.width());
    let src = x.data();
    let planes = x.batch() * x.channels();
    let results = par::map_indices(planes, |plane| {
        let input = &src[plane * h * w..(plane + 1) * h * w];
        let mut vals = Vec::with_capacity(ho * wo);
        let mut idx = Vec::with_capacity(ho * wo);
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best: Option<(T, usize)> = None;
                for (ih, iw) in geo.window(oh, ow, h, w) {
                    let v = input[ih * w + iw];
                    if best.is_none_or(|(b, _)| v > b) {
                        best = Some((v, ih * w + iw));
                    }
                }
                let (v, i) = best.expect("window overlaps input");
                vals.push(v);
                idx.push(plane * h * w + i);
            }
        }
        (vals, idx)
    });
    let mut data = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for (v, i) in results {
        data.extend(v);
        argmax.extend(i);
    }
    Ok((
        Tensor::new([x.batch(), x.channels(), ho, wo], data)?,
        argmax,
    ))
}

pub fn max_pool2d_backward<T: Scalar>(
    x: &Tensor<T>,
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape("max pool gradient shape"));
    }
    let mut out = Tensor::zeros(x.shape());
    let dst = out.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dst[i] += g;
    }
    Ok(out)
}
