use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nnops::conv_output_size;
use crate::res2net::{NetworkSpec, Res2NetBlockConfig, Template};
use crate::tensor::Shape;

/// One countable layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    /// Trainable parameters.
    pub params: u64,
    /// Non-trainable buffers (BN running statistics).
    pub buffers: u64,
    /// Multiply-accumulates for one image; 0 when no resolution was given.
    pub macs: u64,
    /// Output shape for one image, when a resolution was given.
    pub shape: Option<Shape>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub name: String,
    pub resolution: Option<usize>,
    pub rows: Vec<LayerRow>,
}

impl ComplexityReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_buffers(&self) -> u64 {
        self.rows.iter().map(|r| r.buffers).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn params_millions(&self) -> f64 {
        self.total_params() as f64 / 1e6
    }

    pub fn gmacs(&self) -> f64 {
        self.total_macs() as f64 / 1e9
    }

    pub fn row(&self, name: &str) -> Option<&LayerRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// `layer<TAB>params<TAB>macs<TAB>shape` per row, shape as `NxCxHxW` or `-`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.name,
                r.params,
                r.macs,
                fmt_shape(r.shape)
            ));
        }
        out
    }

    /// Aligned plain-text table with totals.
    pub fn to_table(&self) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!(
            "{:<name_w$}  {:>12}  {:>14}  {}\n",
            "layer", "params", "macs", "shape"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<name_w$}  {:>12}  {:>14}  {}\n",
                r.name,
                r.params,
                r.macs,
                fmt_shape(r.shape)
            ));
        }
        out.push_str(&format!(
            "{:<name_w$}  {:>12}  {:>14}\n",
            "total",
            self.total_params(),
            self.total_macs()
        ));
        out
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:.2}M params", self.name, self.params_millions())?;
        if let Some(res) = self.resolution {
            write!(f, ", {:.2}G MACs at {res}x{res}", self.gmacs())?;
        }
        write!(f, ", {} running-stat buffers", self.total_buffers())
    }
}

fn fmt_shape(shape: Option<Shape>) -> String {
    match shape {
        Some([n, c, h, w]) => format!("{n}x{c}x{h}x{w}"),
        None => "-".to_string(),
    }
}

struct Walker {
    rows: Vec<LayerRow>,
    track: bool,
}

impl Walker {
    /// Convolution then batch norm; returns the output spatial size.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        hw: (usize, usize),
    ) -> Result<(usize, usize)> {
        let out = if self.track {
            let pad = k / 2;
            let h = conv_output_size(hw.0, k, stride, pad);
            let w = conv_output_size(hw.1, k, stride, pad);
            match (h, w) {
                (Some(h), Some(w)) => (h, w),
                _ => return Err(Error::InvalidConfig(format!("{prefix}: input too small"))),
            }
        } else {
            (0, 0)
        };
        let params = (c_out * (c_in / groups) * k * k) as u64;
        let shape = self.track.then_some([1, c_out, out.0, out.1]);
        self.rows.push(LayerRow {
            name: format!("{prefix}.conv"),
            params,
            buffers: 0,
            macs: if self.track {
                params * (out.0 * out.1) as u64
            } else {
                0
            },
            shape,
        });
        self.rows.push(LayerRow {
            name: format!("{prefix}.bn"),
            params: 2 * c_out as u64,
            buffers: 2 * c_out as u64,
            macs: 0,
            shape,
        });
        Ok(out)
    }

    fn fc(&mut self, name: &str, c_in: usize, c_out: usize) {
        self.rows.push(LayerRow {
            name: name.to_string(),
            params: (c_out * c_in + c_out) as u64,
            buffers: 0,
            macs: if self.track { (c_in * c_out) as u64 } else { 0 },
            shape: self.track.then_some([1, c_out, 1, 1]),
        });
    }

    fn block(
        &mut self,
        cfg: &Res2NetBlockConfig,
        prefix: &str,
        hw: (usize, usize),
    ) -> Result<(usize, usize)> {
        cfg.validate()?;
        let n = cfg.internal_channels();
        self.conv_bn(&format!("{prefix}.reduce"), cfg.in_channels, n, 1, 1, 1, hw)?;
        let mut out = hw;
        if cfg.scale == 1 {
            out = self.conv_bn(
                &format!("{prefix}.mid"),
                n,
                n,
                3,
                cfg.stride,
                cfg.cardinality,
                hw,
            )?;
        } else {
            for i in 2..=cfg.scale {
                out = self.conv_bn(
                    &format!("{prefix}.k{i}"),
                    cfg.width,
                    cfg.width,
                    3,
                    cfg.stride,
                    cfg.cardinality,
                    hw,
                )?;
            }
        }
        self.conv_bn(
            &format!("{prefix}.expand"),
            n,
            cfg.out_channels,
            1,
            1,
            1,
            out,
        )?;
        if cfg.use_se {
            let h = cfg.se_hidden();
            self.fc(&format!("{prefix}.se.fc1"), cfg.out_channels, h);
            self.fc(&format!("{prefix}.se.fc2"), h, cfg.out_channels);
        }
        if cfg.needs_projection() {
            self.conv_bn(
                &format!("{prefix}.shortcut"),
                cfg.in_channels,
                cfg.out_channels,
                1,
                cfg.stride,
                1,
                hw,
            )?;
        }
        Ok(out)
    }
}

fn walk(spec: &NetworkSpec, resolution: Option<usize>) -> Result<ComplexityReport> {
    spec.validate()?;
    let res = resolution.unwrap_or(0);
    let mut w = Walker {
        rows: Vec::new(),
        track: resolution.is_some(),
    };
    let s = &spec.stem;
    let mut hw = w.conv_bn(
        "stem",
        s.in_channels,
        s.out_channels,
        s.kernel,
        s.stride,
        1,
        (res, res),
    )?;
    if s.max_pool && w.track {
        let pool = |v: usize| conv_output_size(v, 3, 2, 1).unwrap_or(0);
        hw = (pool(hw.0), pool(hw.1));
    }
    for (name, cfg) in spec.blocks() {
        hw = w.block(cfg, &name, hw)?;
    }
    w.fc("fc", spec.feature_channels(), spec.classes);
    Ok(ComplexityReport {
        name: spec.name.clone(),
        resolution,
        rows: w.rows,
    })
}

/// Per-layer trainable parameter counts (convolutions `C_out·(C_in/g)·k²`,
/// BN `2·C` plus `2·C` running-stat buffers, FC `C_out·C_in + C_out`).
pub fn count_params(spec: &NetworkSpec) -> Result<ComplexityReport> {
    walk(spec, None)
}

/// Per-layer parameter and multiply-accumulate counts for one
/// `resolution × resolution` image. Convolution MACs are parameters times
/// output pixels, FC MACs `C_in·C_out`; BN, activations and pooling are free.
pub fn count_macs(spec: &NetworkSpec, resolution: usize) -> Result<ComplexityReport> {
    if resolution == 0 {
        return Err(Error::InvalidConfig("resolution must be positive".into()));
    }
    walk(spec, Some(resolution))
}

/// Counts for a single block, named under `prefix`.
pub fn block_complexity(
    cfg: &Res2NetBlockConfig,
    prefix: &str,
    hw: Option<(usize, usize)>,
) -> Result<ComplexityReport> {
    let mut w = Walker {
        rows: Vec::new(),
        track: hw.is_some(),
    };
    w.block(cfg, prefix, hw.unwrap_or((0, 0)))?;
    Ok(ComplexityReport {
        name: prefix.to_string(),
        resolution: hw.map(|(h, _)| h),
        rows: w.rows,
    })
}

/// The width in `range` whose `(width, scale)` variant of `baseline` has the
/// parameter count closest to the baseline's. Ties go to the smaller width;
/// widths that leave a stage with no channels are skipped.
pub fn solve_width_for_scale(
    baseline: &NetworkSpec,
    scale: usize,
    range: RangeInclusive<usize>,
) -> Result<usize> {
    if scale == 0 {
        return Err(Error::InvalidConfig("scale must be positive".into()));
    }
    let target = count_params(baseline)?.total_params() as i128;
    let mut best: Option<(i128, usize)> = None;
    for w in range {
        let Ok(candidate) = baseline.rescaled(w, scale) else {
            continue;
        };
        let Ok(report) = walk(&candidate, None) else {
            continue;
        };
        let gap = (report.total_params() as i128 - target).abs();
        if best.is_none_or(|(b, _)| gap < b) {
            best = Some((gap, w));
        }
    }
    best.map(|(_, w)| w).ok_or(Error::EmptyRange)
}

/// A network dimension that [`sweep_dimension`] can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dimension {
    Scale,
    Cardinality,
    Depth,
}

impl FromStr for Dimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale" => Ok(Dimension::Scale),
            "cardinality" => Ok(Dimension::Cardinality),
            "depth" => Ok(Dimension::Depth),
            other => Err(Error::InvalidDimension(other.to_string())),
        }
    }
}

/// The CIFAR base of the capacity sweep: 29 layers, cardinality 6, scale 1,
/// 24 channels per group.
pub const SWEEP_BASE: Template = Template::Res2NeXt29 {
    cardinality: 6,
    width: 24,
    scale: 1,
    depth: 29,
};

fn vary(base: &Template, dim: Dimension, value: usize) -> Result<Template> {
    let t = match (*base, dim) {
        (
            Template::Res2NeXt29 {
                cardinality,
                width,
                depth,
                ..
            },
            Dimension::Scale,
        ) => Template::Res2NeXt29 {
            cardinality,
            width,
            scale: value,
            depth,
        },
        (
            Template::Res2NeXt29 {
                width,
                scale,
                depth,
                ..
            },
            Dimension::Cardinality,
        ) => Template::Res2NeXt29 {
            cardinality: value,
            width,
            scale,
            depth,
        },
        (
            Template::Res2NeXt29 {
                cardinality,
                width,
                scale,
                ..
            },
            Dimension::Depth,
        ) => Template::Res2NeXt29 {
            cardinality,
            width,
            scale,
            depth: value,
        },
        (Template::ResNeXt29 { cardinality, width }, _) => {
            return vary(
                &Template::Res2NeXt29 {
                    cardinality,
                    width,
                    scale: 1,
                    depth: 29,
                },
                dim,
                value,
            )
        }
        (Template::Res2Net50 { width, .. }, Dimension::Scale)
        | (Template::Mini { width, .. }, Dimension::Scale) => base.with_width_scale(width, value),
        (t, d) => {
            return Err(Error::InvalidDimension(format!(
                "{d:?} cannot be varied on {t}"
            )));
        }
    };
    Ok(t)
}

/// Total parameters of `base` with one dimension replaced by each value.
pub fn sweep_dimension(
    base: &Template,
    classes: usize,
    dim: Dimension,
    values: &[usize],
) -> Result<Vec<(usize, u64)>> {
    values
        .iter()
        .map(|&v| {
            let spec = crate::res2net::build_network(&vary(base, dim, v)?, classes, false)?;
            Ok((v, count_params(&spec)?.total_params()))
        })
        .collect()
}
