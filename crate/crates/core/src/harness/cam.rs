use std::fs;
use std::path::Path;

use super::data::prepare;
use crate::error::{Error, Result};
use crate::nnops::Mode;
use crate::res2net::{Graph, NetworkSpec, ParamStore};
use crate::tensor::Tensor;

/// A class activation map at layer resolution and upsampled to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct CamMap {
    /// `(1, 1, h, w)` in `[0, 1]`.
    pub map: Tensor<f32>,
    /// `(1, 1, H, W)` bilinear upsampling of `map`.
    pub upsampled: Tensor<f32>,
}

impl CamMap {
    /// `(row, col)` of the largest upsampled value, first in raster order.
    pub fn peak(&self) -> (usize, usize) {
        let w = self.upsampled.width();
        let data = self.upsampled.data();
        let mut best = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[best] {
                best = i;
            }
        }
        (best / w.max(1), best % w.max(1))
    }
}

/// Grad-CAM for `class_id` at activation `layer` on a single raw image
/// `(1, C, H, W)` in `[0, 1]`.
///
/// Channel weights are the spatial means of the class logit's gradient; the
/// map is the ReLU of the weighted channel sum, min-max normalized.
pub fn grad_cam(
    spec: &NetworkSpec,
    params: &ParamStore<f32>,
    image: &Tensor<f32>,
    class_id: usize,
    layer: &str,
) -> Result<CamMap> {
    if image.batch() != 1 {
        return Err(Error::shape(format!(
            "expected one image, got {}",
            image.batch()
        )));
    }
    if class_id >= spec.classes {
        return Err(Error::InvalidConfig(format!(
            "class {class_id} outside 0..{}",
            spec.classes
        )));
    }
    if !spec.activation_names().iter().any(|n| n == layer) {
        return Err(Error::UnknownLayer(layer.to_string()));
    }
    let x = prepare(params, image);
    let mut g = Graph::new(params, Mode::Eval);
    let xv = g.input(x);
    let logits = spec.forward(&mut g, xv)?;
    let mut pick = Tensor::zeros(g.value(logits).shape());
    pick.data_mut()[class_id] = 1.0;
    let score = g.tape.weighted_sum(logits, pick)?;
    let a = g.activation(layer)?;
    let grads = g.tape.backward(score)?;
    let map = cam_from(g.value(a), &grads.wrt(a))?;
    let upsampled = upsample_bilinear(&map, image.height(), image.width());
    Ok(CamMap { map, upsampled })
}

/// `relu(Σ_k α_k A_k)` with `α_k` the spatial mean of `∂y/∂A_k`, then
/// min-max normalized. An all-zero map stays zero; a constant positive map
/// becomes all ones.
pub fn cam_from(activation: &Tensor<f32>, grad: &Tensor<f32>) -> Result<Tensor<f32>> {
    activation.expect_same_shape(grad)?;
    let [_, c, h, w] = activation.shape();
    let plane = h * w;
    if plane == 0 {
        return Err(Error::EmptySpatial);
    }
    let mut map = vec![0.0f32; plane];
    for k in 0..c {
        let g = &grad.data()[k * plane..(k + 1) * plane];
        let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let a = &activation.data()[k * plane..(k + 1) * plane];
        for (m, &v) in map.iter_mut().zip(a) {
            *m += (alpha * v as f64) as f32;
        }
    }
    map.iter_mut().for_each(|v| *v = v.max(0.0));
    let hi = map.iter().copied().fold(0.0f32, f32::max);
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    if hi > lo {
        map.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else if hi > 0.0 {
        map.iter_mut().for_each(|v| *v = 1.0);
    }
    Tensor::new([1, 1, h, w], map)
}

/// Bilinear resize of every plane with half-pixel centers and edge clamping.
pub fn upsample_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let [n, c, h, w] = t.shape();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f32) {
        let src = ((o as f32 + 0.5) * inp as f32 / out as f32 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, src - i0 as f32)
    };
    Tensor::from_fn([n, c, out_h, out_w], |b, ch, y, x| {
        let (y0, y1, fy) = coord(y, out_h, h);
        let (x0, x1, fx) = coord(x, out_w, w);
        let top = t.at(b, ch, y0, x0) * (1.0 - fx) + t.at(b, ch, y0, x1) * fx;
        let bottom = t.at(b, ch, y1, x0) * (1.0 - fx) + t.at(b, ch, y1, x1) * fx;
        (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
    })
}

/// 8-bit binary PGM (`P5`) of a `(1, 1, h, w)` map in `[0, 1]`.
pub fn encode_pgm(map: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (map.height(), map.width());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.data()[..h * w]
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pgm(map))?;
    Ok(())
}

/// 8-bit binary PPM (`P6`) of a `(1, 3, h, w)` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

/// Reads a binary PPM (`P6`) or PGM (`P5`, replicated to three channels)
/// with maxval 255 into `(1, 3, h, w)` in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated image header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(Error::Parse(format!("unsupported image kind `{other}`"))),
    };
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad header field `{s}`")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Parse(format!("maxval {maxval} is not 255")));
    }
    let body = bytes
        .get(pos..pos + w * h * channels)
        .ok_or(Error::TruncatedFile)?;
    Ok(Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
        let ch = if channels == 3 { c } else { 0 };
        body[(y * w + x) * channels + ch] as f32 / 255.0
    }))
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_pnm(&fs::read(path)?)
}
