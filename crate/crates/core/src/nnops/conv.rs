//! 2-D cross-correlation with zero padding and channel groups.
//!
//! [`conv2d_direct`] is the reference nested loop. [`conv2d`] lowers each
//! sample and group to an im2col matrix product; both agree to rounding.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1, "same" padding for an odd kernel.
    pub const fn same(kernel: usize, groups: usize) -> Self {
        Self::new(1, kernel / 2, groups)
    }
}

/// Weight shaped `(C_out, C_in / groups, k, k)`; no bias term.
#[derive(Clone, Debug)]
pub struct Conv2dParams<T = f32> {
    pub weight: Tensor<T>,
    pub geometry: ConvGeometry,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.geometry)
    }
}

/// `⌊(size + 2·padding − kernel) / stride⌋ + 1`, or `None` when the padded
/// input is smaller than the kernel.
pub fn conv_output_size(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    (size + 2 * padding)
        .checked_sub(kernel)
        .map(|span| span / stride.max(1) + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub geo: ConvGeometry,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin_g * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geo.stride == 1 && self.geo.padding == 0
    }
}

pub(crate) fn conv_dims(x: Shape, weight: Shape, geo: ConvGeometry) -> Result<ConvDims> {
    let [n, c_in, h, w] = x;
    let [c_out, cin_g, k, k2] = weight;
    if k != k2 {
        return Err(Error::shape(format!("non-square kernel {k}×{k2}")));
    }
    if k % 2 == 0 {
        return Err(Error::InvalidConfig(format!("even kernel size {k}")));
    }
    if geo.stride == 0 {
        return Err(Error::InvalidConfig("stride must be positive".into()));
    }
    let groups = geo.groups;
    if groups == 0 || c_out % groups != 0 {
        return Err(Error::NonDivisibleChannels {
            channels: c_out,
            divisor: groups,
        });
    }
    if c_in % groups != 0 {
        return Err(Error::NonDivisibleChannels {
            channels: c_in,
            divisor: groups,
        });
    }
    if cin_g * groups != c_in {
        return Err(Error::shape(format!(
            "input has {c_in} channels, weight expects {} ({} per group × {groups})",
            cin_g * groups,
            cin_g
        )));
    }
    let (h_out, w_out) = match (
        conv_output_size(h, k, geo.stride, geo.padding),
        conv_output_size(w, k, geo.stride, geo.padding),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "{h}×{w} input with padding {} is smaller than the {k}×{k} kernel",
                geo.padding
            )))
        }
    };
    Ok(ConvDims {
        n,
        c_in,
        h,
        w,
        c_out,
        k,
        h_out,
        w_out,
        cin_g,
        cout_g: c_out / groups,
        geo,
    })
}

/// Reference implementation: one accumulator per output element, summed in
/// `(c_in, kh, kw)` order.
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), weight.shape(), geo)?;
    let mut out = Tensor::zeros([d.n, d.c_out, d.h_out, d.w_out]);
    let pad = d.geo.padding as isize;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = co / d.cout_g;
            for oh in 0..d.h_out {
                for ow in 0..d.w_out {
                    let mut acc = T::zero();
                    for ci in 0..d.cin_g {
                        let cx = g * d.cin_g + ci;
                        for kh in 0..d.k {
                            let ih = (oh * d.geo.stride + kh) as isize - pad;
                            if ih < 0 || ih >= d.h as isize {
                                continue;
                            }
                            for kw in 0..d.k {
                                let iw = (ow * d.geo.stride + kw) as isize - pad;
                                if iw < 0 || iw >= d.w as isize {
                                    continue;
                                }
                                acc += weight.at(co, ci, kh, kw)
                                    * x.at(n, cx, ih as usize, iw as usize);
                            }
                        }
                    }
                    out.set(n, co, oh, ow, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Fills `col` (`patch × out_plane`, row-major) from one group of one sample.
fn im2col<T: Scalar>(src: &[T], d: &ConvDims, col: &mut [T]) {
    let plane = d.out_plane();
    let pad = d.geo.padding as isize;
    for ci in 0..d.cin_g {
        let chan = &src[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..d.k {
            for kw in 0..d.k {
                let row = (ci * d.k + kh) * d.k + kw;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oh in 0..d.h_out {
                    let ih = (oh * d.geo.stride + kh) as isize - pad;
                    let line = &mut dst[oh * d.w_out..(oh + 1) * d.w_out];
                    if ih < 0 || ih >= d.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &chan[ih as usize * d.w..(ih as usize + 1) * d.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * d.geo.stride + kw) as isize - pad;
                        *v = if iw < 0 || iw >= d.w as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `col` back into one group of one sample.
fn col2im<T: Scalar>(col: &[T], d: &ConvDims, dst: &mut [T]) {
    let plane = d.out_plane();
    let pad = d.geo.padding as isize;
    for ci in 0..d.cin_g {
        let chan = &mut dst[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..d.k {
            for kw in 0..d.k {
                let row = (ci * d.k + kh) * d.k + kw;
                let src = &col[row * plane..(row + 1) * plane];
                for oh in 0..d.h_out {
                    let ih = (oh * d.geo.stride + kh) as isize - pad;
                    if ih < 0 || ih >= d.h as isize {
                        continue;
                    }
                    for ow in 0..d.w_out {
                        let iw = (ow * d.geo.stride + kw) as isize - pad;
                        if iw < 0 || iw >= d.w as isize {
                            continue;
                        }
                        chan[ih as usize * d.w + iw as usize] += src[oh * d.w_out + ow];
                    }
                }
            }
        }
    }
}

/// im2col + matrix-multiply convolution, parallel over the batch.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(x.shape(), weight.shape(), geo)?;
    let mut out = Tensor::zeros([d.n, d.c_out, d.h_out, d.w_out]);
    let in_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * d.out_plane();
    let patch = d.patch();
    let plane = d.out_plane();
    let xs = x.data();
    let ws = weight.data();
    par::for_each_chunk(out.data_mut(), out_len, |n, dst| {
        let sample = &xs[n * in_len..(n + 1) * in_len];
        let mut col = if d.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); patch * plane]
        };
        for g in 0..d.geo.groups {
            let src = &sample[g * d.cin_g * d.h * d.w..(g + 1) * d.cin_g * d.h * d.w];
            let b: &[T] = if d.is_pointwise() {
                src
            } else {
                im2col(src, &d, &mut col);
                &col
            };
            let w_g = &ws[g * d.cout_g * patch..(g + 1) * d.cout_g * patch];
            let c = &mut dst[g * d.cout_g * plane..(g + 1) * d.cout_g * plane];
            T::gemm(
                d.cout_g,
                patch,
                plane,
                w_g,
                (patch as isize, 1),
                b,
                (plane as isize, 1),
                T::zero(),
                c,
            );
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    geo: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = conv_dims(x.shape(), weight.shape(), geo)?;
    if grad_out.shape() != [d.n, d.c_out, d.h_out, d.w_out] {
        return Err(Error::shape(format!(
            "conv output gradient {:?} does not match {:?}",
            grad_out.shape(),
            [d.n, d.c_out, d.h_out, d.w_out]
        )));
    }
    let in_len = d.c_in * d.h * d.w;
    let out_len = d.c_out * d.out_plane();
    let patch = d.patch();
    let plane = d.out_plane();
    let xs = x.data();
    let ws = weight.data();
    let gs = grad_out.data();

    // Per-sample partial results, reduced below in sample order.
    let partials = par::map_indices(d.n, |n| {
        let sample = &xs[n * in_len..(n + 1) * in_len];
        let dout = &gs[n * out_len..(n + 1) * out_len];
        let mut dx = vec![T::zero(); in_len];
        let mut dw = vec![T::zero(); weight.len()];
        let mut col = vec![T::zero(); patch * plane];
        let mut dcol = vec![T::zero(); patch * plane];
        for g in 0..d.geo.groups {
            let src = &sample[g * d.cin_g * d.h * d.w..(g + 1) * d.cin_g * d.h * d.w];
            let b: &[T] = if d.is_pointwise() {
                src
            } else {
                im2col(src, &d, &mut col);
                &col
            };
            let dout_g = &dout[g * d.cout_g * plane..(g + 1) * d.cout_g * plane];
            let w_g = &ws[g * d.cout_g * patch..(g + 1) * d.cout_g * patch];
            T::gemm(
                d.cout_g,
                plane,
                patch,
                dout_g,
                (plane as isize, 1),
                b,
                (1, plane as isize),
                T::zero(),
                &mut dw[g * d.cout_g * patch..(g + 1) * d.cout_g * patch],
            );
            let dx_g = &mut dx[g * d.cin_g * d.h * d.w..(g + 1) * d.cin_g * d.h * d.w];
            if d.is_pointwise() {
                T::gemm(
                    patch,
                    d.cout_g,
                    plane,
                    w_g,
                    (1, patch as isize),
                    dout_g,
                    (plane as isize, 1),
                    T::zero(),
                    dx_g,
                );
            } else {
                T::gemm(
                    patch,
                    d.cout_g,
                    plane,
                    w_g,
                    (1, patch as isize),
                    dout_g,
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcol,
                );
                col2im(&dcol, &d, dx_g);
            }
        }
        (dx, dw)
    });

    let mut grad_x = Vec::with_capacity(d.n * in_len);
    let mut grad_w = Tensor::zeros(weight.shape());
    for (dx, dw) in partials {
        grad_x.extend_from_slice(&dx);
        for (a, b) in grad_w.data_mut().iter_mut().zip(dw) {
            *a += b;
        }
    }
    Ok((Tensor::new(x.shape(), grad_x)?, grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x = random([2, 1, 4, 5], 1);
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, ConvGeometry::new(1, 0, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let x = random([1, 3, 5, 5], 2);
        let w = Tensor::zeros([4, 3, 3, 3]);
        let y = conv2d(&x, &w, ConvGeometry::same(3, 1)).unwrap();
        assert_eq!(y, Tensor::zeros([1, 4, 5, 5]));
    }

    #[test]
    fn ones_kernel_center_sums_window() {
        let x = Tensor::new([1, 1, 3, 3], (1..=9).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        for y in [
            conv2d(&x, &w, ConvGeometry::same(3, 1)).unwrap(),
            conv2d_direct(&x, &w, ConvGeometry::same(3, 1)).unwrap(),
        ] {
            assert_eq!(y.at(0, 0, 1, 1), 45.0);
            // corner sees 1+2+4+5
            assert_eq!(y.at(0, 0, 0, 0), 12.0);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let x = Tensor::<f32>::zeros([1, 4, 5, 5]);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros([3, 2, 3, 3]), ConvGeometry::same(3, 2)),
            Err(Error::NonDivisibleChannels { .. })
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::zeros([4, 4, 2, 2]), ConvGeometry::new(1, 0, 1)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            conv2d(&x, &Tensor::zeros([4, 3, 3, 3]), ConvGeometry::same(3, 1)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            conv2d(
                &Tensor::<f32>::zeros([1, 4, 2, 2]),
                &Tensor::zeros([4, 4, 3, 3]),
                ConvGeometry::new(1, 0, 1)
            ),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn grouped_equals_independent_halves() {
        let x = random([2, 6, 5, 5], 3);
        let w = random([4, 3, 3, 3], 4);
        let y = conv2d(&x, &w, ConvGeometry::same(3, 2)).unwrap();
        let halves: Vec<_> = (0..2)
            .map(|g| {
                let xg = x.slice_channels(3 * g, 3).unwrap();
                let wg =
                    Tensor::new([2, 3, 3, 3], w.data()[g * 54..(g + 1) * 54].to_vec()).unwrap();
                conv2d(&xg, &wg, ConvGeometry::same(3, 1)).unwrap()
            })
            .collect();
        assert_eq!(y, Tensor::concat_channels(&halves).unwrap());
    }

    proptest! {
        #[test]
        fn fast_path_matches_direct(
            n in 1usize..3, cin_g in 1usize..4, cout_g in 1usize..4, g in prop::sample::select(vec![1usize, 2, 4]),
            k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, pad in 0usize..2,
            h in 3usize..8, w in 3usize..8, seed in any::<u64>(),
        ) {
            let x = random([n, cin_g * g, h, w], seed);
            let wt = random([cout_g * g, cin_g, k, k], seed ^ 0x55);
            let geo = ConvGeometry::new(stride, pad, g);
            let fast = conv2d(&x, &wt, geo).unwrap();
            let slow = conv2d_direct(&x, &wt, geo).unwrap();
            prop_assert_eq!(fast.shape(), [n, cout_g * g, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
            let scale = slow.max_abs().max(1e-6);
            prop_assert!(fast.max_abs_diff(&slow).unwrap() / scale <= 1e-5);
        }

        #[test]
        fn grouped_is_concat_of_partitions(g in prop::sample::select(vec![1usize, 2, 4]), seed in any::<u64>()) {
            let x = random([1, 2 * g, 4, 4], seed);
            let w = random([3 * g, 2, 3, 3], seed.wrapping_add(1));
            let y = conv2d(&x, &w, ConvGeometry::same(3, g)).unwrap();
            let parts: Vec<_> = (0..g).map(|i| {
                let xg = x.slice_channels(2 * i, 2).unwrap();
                let wg = Tensor::new([3, 2, 3, 3], w.data()[i * 54..(i + 1) * 54].to_vec()).unwrap();
                conv2d(&xg, &wg, ConvGeometry::same(3, 1)).unwrap()
            }).collect();
            prop_assert_eq!(y, Tensor::concat_channels(&parts).unwrap());
        }
    }
}
