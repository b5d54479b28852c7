use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::res2net::ParamStore;
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 2 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR100_CLASSES: usize = 100;

/// Axis-aligned box in pixel coordinates, inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..=self.bottom).contains(&row) && (self.left..=self.right).contains(&col)
    }
}

/// Images in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `(N, 3, H, W)`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Where the class evidence was drawn, for generated data.
    pub boxes: Option<Vec<BoundingBox>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor<f32> {
        self.images.gather_samples(&[i])
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// Reads a CIFAR-100 binary file: 3074-byte records of coarse label, fine
/// label and 32×32 pixels as R, G, B planes. Keeps the fine label. A nonzero
/// `limit` keeps only the first `limit` records.
pub fn load_cifar100(path: impl AsRef<Path>, limit: usize) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_cifar100(&bytes, limit)
}

pub fn parse_cifar100(bytes: &[u8], limit: usize) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::BadRecordLength {
            len: bytes.len() as u64,
            record: CIFAR_RECORD,
        });
    }
    let mut n = bytes.len() / CIFAR_RECORD;
    if limit > 0 {
        n = n.min(limit);
    }
    let plane = 3 * CIFAR_SIDE * CIFAR_SIDE;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * plane);
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(n) {
        let fine = rec[1] as usize;
        if fine >= CIFAR100_CLASSES {
            return Err(Error::Parse(format!("fine label {fine} out of range")));
        }
        labels.push(fine);
        data.extend(rec[2..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(Dataset {
        images: Tensor::new([n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
        classes: CIFAR100_CLASSES,
        boxes: None,
    })
}

/// 3×3 binary glyphs, one per class; classes beyond the table reuse a glyph
/// rotated by the class index.
const GLYPHS: [[u8; 9]; 8] = [
    [1, 1, 1, 1, 0, 1, 1, 1, 1],
    [0, 1, 0, 1, 1, 1, 0, 1, 0],
    [1, 0, 1, 0, 1, 0, 1, 0, 1],
    [1, 1, 1, 0, 0, 0, 1, 1, 1],
    [1, 0, 1, 1, 0, 1, 1, 0, 1],
    [1, 1, 0, 1, 0, 0, 0, 0, 0],
    [1, 0, 0, 1, 0, 0, 1, 1, 1],
    [0, 0, 1, 0, 1, 0, 1, 0, 0],
];

fn glyph(class: usize) -> [u8; 9] {
    let mut g = GLYPHS[class % GLYPHS.len()];
    for _ in 0..(class / GLYPHS.len()) % 4 {
        // Rotate a quarter turn.
        let r = g;
        for y in 0..3 {
            for x in 0..3 {
                g[y * 3 + x] = r[(2 - x) * 3 + y];
            }
        }
    }
    g
}

/// Magnifications the glyphs are drawn at.
pub const GLYPH_SCALES: [usize; 3] = [2, 3, 4];

/// Class-identifying 3×3 glyphs drawn at a random magnification and
/// position over low-amplitude noise. All classes share one colour and ink
/// coverage only varies with the glyph, so a class is recognised by shape at
/// whatever scale it appears. Labels cycle through the classes, so the
/// histogram is balanced to within one.
pub fn gen_synthetic_multiscale(
    n: usize,
    classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if image_size < 16 {
        return Err(Error::InvalidConfig(format!(
            "image size {image_size} is below 16"
        )));
    }
    if classes == 0 {
        return Err(Error::InvalidConfig("class count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = image_size;
    let mut data = vec![0.0f32; n * 3 * side * side];
    let mut labels = Vec::with_capacity(n);
    let mut boxes = Vec::with_capacity(n);
    let ink = [0.9f32, 0.8, 0.3];
    for i in 0..n {
        let label = i % classes;
        let g = glyph(label);
        let m = GLYPH_SCALES[rng.gen_range(0..GLYPH_SCALES.len())];
        let extent = 3 * m;
        let top = rng.gen_range(0..=side - extent);
        let left = rng.gen_range(0..=side - extent);
        let img = &mut data[i * 3 * side * side..(i + 1) * 3 * side * side];
        for v in img.iter_mut() {
            *v = 0.2 + rng.gen_range(0.0..0.1);
        }
        for y in 0..extent {
            for x in 0..extent {
                if g[(y / m) * 3 + x / m] == 1 {
                    for (c, &v) in ink.iter().enumerate() {
                        img[(c * side + top + y) * side + left + x] = v;
                    }
                }
            }
        }
        labels.push(label);
        boxes.push(BoundingBox {
            top,
            left,
            bottom: top + extent - 1,
            right: left + extent - 1,
        });
    }
    Ok(Dataset {
        images: Tensor::new([n, 3, side, side], data)?,
        labels,
        classes,
        boxes: Some(boxes),
    })
}

/// Per-channel mean and standard deviation of a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub const MEAN_KEY: &str = "data.mean";
pub const STD_KEY: &str = "data.std";

impl Standardizer {
    pub fn fit(images: &Tensor<f32>) -> Self {
        let [n, c, _, _] = images.shape();
        let plane = images.spatial();
        let count = (n * plane).max(1) as f64;
        let mut mean = vec![0.0f32; c];
        let mut std = vec![1.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            let mut s2 = 0.0f64;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &v in &images.data()[base..base + plane] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
            }
            let m = s / count;
            let var = (s2 / count - m * m).max(0.0);
            mean[ch] = m as f32;
            std[ch] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, images: &Tensor<f32>) -> Tensor<f32> {
        let c = images.channels();
        let plane = images.spatial();
        let mut out = images.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
        out
    }

    pub fn store(&self, params: &mut ParamStore<f32>) {
        let c = self.mean.len();
        params.insert(
            MEAN_KEY,
            Tensor::new([c, 1, 1, 1], self.mean.clone()).expect("length c"),
        );
        params.insert(
            STD_KEY,
            Tensor::new([c, 1, 1, 1], self.std.clone()).expect("length c"),
        );
    }

    pub fn from_params(params: &ParamStore<f32>) -> Option<Self> {
        let mean = params.get(MEAN_KEY).ok()?.data().to_vec();
        let std = params.get(STD_KEY).ok()?.data().to_vec();
        Some(Self { mean, std })
    }
}

/// Standardizes with the statistics stored in `params`, if any.
pub fn prepare(params: &ParamStore<f32>, images: &Tensor<f32>) -> Tensor<f32> {
    match Standardizer::from_params(params) {
        Some(s) => s.apply(images),
        None => images.clone(),
    }
}

/// Random horizontal flip and a random crop of a `pad`-padded copy, per
/// sample.
pub fn augment(images: &Tensor<f32>, pad: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let [n, c, h, w] = images.shape();
    let mut out = Tensor::zeros(images.shape());
    for b in 0..n {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out.set(b, ch, y, x, images.at(b, ch, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

/// Index order for one epoch.
pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
