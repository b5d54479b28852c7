//! Whole-network descriptions and the templates used throughout the crate.

use std::fmt;

use super::block::{block_param_layout, res2net_block_forward};
use super::config::Res2NetBlockConfig;
use super::graph::Graph;
use super::params::{init_params, ParamSlot, ParamStore};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nnops::{ConvGeometry, PoolGeometry};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// 3×3 stride-2 max pool after the stem convolution.
    pub max_pool: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    /// Nominal bottleneck width the split widths are derived from:
    /// `width_per_split = cardinality · ⌊w · planes / 64⌋`.
    pub planes: usize,
    pub blocks: Vec<Res2NetBlockConfig>,
}

/// Network families with their free parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    /// Standard ResNet-50 (equivalent to `Res2Net50 { 64, 1, 1 }`).
    ResNet50,
    Res2Net50 {
        width: usize,
        scale: usize,
        cardinality: usize,
    },
    /// ResNeXt-29 for 32×32 inputs (equivalent to `Res2NeXt29` with scale 1).
    ResNeXt29 { cardinality: usize, width: usize },
    Res2NeXt29 {
        cardinality: usize,
        width: usize,
        scale: usize,
        depth: usize,
    },
    /// Three stages of two blocks at desk-scale widths.
    Mini {
        width: usize,
        scale: usize,
        cardinality: usize,
    },
}

impl Template {
    /// `(width, scale, cardinality)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        match *self {
            Template::ResNet50 => (64, 1, 1),
            Template::Res2Net50 {
                width,
                scale,
                cardinality,
            }
            | Template::Mini {
                width,
                scale,
                cardinality,
            } => (width, scale, cardinality),
            Template::ResNeXt29 { cardinality, width } => (width, 1, cardinality),
            Template::Res2NeXt29 {
                cardinality,
                width,
                scale,
                ..
            } => (width, scale, cardinality),
        }
    }

    /// The same family with a different width and scale.
    pub fn with_width_scale(&self, width: usize, scale: usize) -> Template {
        match *self {
            Template::ResNet50 => Template::Res2Net50 {
                width,
                scale,
                cardinality: 1,
            },
            Template::Res2Net50 { cardinality, .. } => Template::Res2Net50 {
                width,
                scale,
                cardinality,
            },
            Template::ResNeXt29 { cardinality, .. } => Template::Res2NeXt29 {
                cardinality,
                width,
                scale,
                depth: 29,
            },
            Template::Res2NeXt29 {
                cardinality, depth, ..
            } => Template::Res2NeXt29 {
                cardinality,
                width,
                scale,
                depth,
            },
            Template::Mini { cardinality, .. } => Template::Mini {
                width,
                scale,
                cardinality,
            },
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Template::ResNet50 => write!(f, "resnet50"),
            Template::Res2Net50 {
                width,
                scale,
                cardinality,
            } => {
                write!(f, "res2net50-{width}w{scale}s")?;
                if cardinality > 1 {
                    write!(f, "{cardinality}c")?;
                }
                Ok(())
            }
            Template::ResNeXt29 { cardinality, width } => {
                write!(f, "resnext29-{cardinality}c{width}w")
            }
            Template::Res2NeXt29 {
                cardinality,
                width,
                scale,
                depth,
            } => write!(f, "res2next{depth}-{cardinality}c{width}w{scale}s"),
            Template::Mini {
                width,
                scale,
                cardinality,
            } => {
                write!(f, "mini-{width}w{scale}s")?;
                if cardinality > 1 {
                    write!(f, "{cardinality}c")?;
                }
                Ok(())
            }
        }
    }
}

/// Ordered layer description from which executable models and analytical
/// reports both derive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub classes: usize,
}

struct Family {
    stem: StemSpec,
    planes: &'static [usize],
    out_channels: Vec<usize>,
    depths: Vec<usize>,
}

fn split_width(width: usize, planes: usize, cardinality: usize) -> usize {
    cardinality * (width * planes / 64)
}

/// Builds the layer description for `template`.
pub fn build_network(template: &Template, classes: usize, se: bool) -> Result<NetworkSpec> {
    let (width, scale, cardinality) = template.dims();
    if width == 0 || scale == 0 || cardinality == 0 || classes == 0 {
        return Err(Error::InvalidTemplate(format!(
            "{template}: width, scale, cardinality and classes must be positive"
        )));
    }
    let family = match *template {
        Template::ResNet50 | Template::Res2Net50 { .. } => Family {
            stem: StemSpec {
                in_channels: 3,
                out_channels: 64,
                kernel: 7,
                stride: 2,
                max_pool: true,
            },
            planes: &[64, 128, 256, 512],
            out_channels: vec![256, 512, 1024, 2048],
            depths: vec![3, 4, 6, 3],
        },
        Template::ResNeXt29 { .. } | Template::Res2NeXt29 { .. } => {
            let depth = match *template {
                Template::Res2NeXt29 { depth, .. } => depth,
                _ => 29,
            };
            if depth < 11 || (depth - 2) % 9 != 0 {
                return Err(Error::InvalidTemplate(format!(
                    "depth {depth} is not 9·k + 2 for k ≥ 1"
                )));
            }
            Family {
                stem: StemSpec {
                    in_channels: 3,
                    out_channels: 64,
                    kernel: 3,
                    stride: 1,
                    max_pool: false,
                },
                planes: &[64, 128, 256],
                out_channels: vec![256, 512, 1024],
                depths: vec![(depth - 2) / 9; 3],
            }
        }
        Template::Mini { .. } => Family {
            stem: StemSpec {
                in_channels: 3,
                out_channels: 16,
                kernel: 3,
                stride: 1,
                max_pool: false,
            },
            planes: &[64, 128, 256],
            out_channels: vec![32, 64, 128],
            depths: vec![2, 2, 2],
        },
    };

    let mut stages = Vec::with_capacity(family.planes.len());
    let mut in_channels = family.stem.out_channels;
    for (i, &planes) in family.planes.iter().enumerate() {
        let w = split_width(width, planes, cardinality);
        if w == 0 {
            return Err(Error::InvalidTemplate(format!(
                "{template}: width {width} gives zero channels per split at stage {}",
                i + 1
            )));
        }
        let mut blocks = Vec::with_capacity(family.depths[i]);
        for b in 0..family.depths[i] {
            let stride = if i > 0 && b == 0 { 2 } else { 1 };
            let cfg = Res2NetBlockConfig::new(in_channels, family.out_channels[i], w, scale)
                .with_cardinality(cardinality)
                .with_stride(stride)
                .with_se(se);
            cfg.validate()?;
            blocks.push(cfg);
            in_channels = family.out_channels[i];
        }
        stages.push(StageSpec { planes, blocks });
    }
    let mut name = template.to_string();
    if se {
        name.push_str("-se");
    }
    Ok(NetworkSpec {
        name,
        stem: family.stem,
        stages,
        classes,
    })
}

/// [`build_network`] plus freshly initialized parameters.
pub fn build_network_with_params(
    template: &Template,
    classes: usize,
    se: bool,
    seed: u64,
) -> Result<(NetworkSpec, ParamStore<f32>)> {
    let spec = build_network(template, classes, se)?;
    let params = init_params(&spec.param_layout(), seed);
    Ok((spec, params))
}

/// Name of block `b` of stage `s` (both zero-based): `stage{s+1}.{b}`.
pub fn block_name(stage: usize, block: usize) -> String {
    format!("stage{}.{}", stage + 1, block)
}

impl NetworkSpec {
    pub fn blocks(&self) -> impl Iterator<Item = (String, &Res2NetBlockConfig)> {
        self.stages.iter().enumerate().flat_map(|(s, st)| {
            st.blocks
                .iter()
                .enumerate()
                .map(move |(b, cfg)| (block_name(s, b), cfg))
        })
    }

    pub fn feature_channels(&self) -> usize {
        self.stages
            .last()
            .and_then(|s| s.blocks.last())
            .map_or(self.stem.out_channels, |b| b.out_channels)
    }

    /// Every tensor the network owns, in a stable order.
    pub fn param_layout(&self) -> Vec<ParamSlot> {
        let s = &self.stem;
        let mut slots = vec![ParamSlot::new(
            "stem.conv.weight",
            [s.out_channels, s.in_channels, s.kernel, s.kernel],
        )];
        for leaf in ["gamma", "beta", "running_mean", "running_var"] {
            slots.push(ParamSlot::new(
                format!("stem.bn.{leaf}"),
                [s.out_channels, 1, 1, 1],
            ));
        }
        for (name, cfg) in self.blocks() {
            slots.extend(block_param_layout(cfg, &name));
        }
        let c = self.feature_channels();
        slots.push(ParamSlot::new("fc.weight", [self.classes, c, 1, 1]));
        slots.push(ParamSlot::new("fc.bias", [self.classes, 1, 1, 1]));
        slots
    }

    /// Names of the activations a forward pass marks, in order.
    pub fn activation_names(&self) -> Vec<String> {
        let mut names = vec!["stem".to_string()];
        names.extend(self.blocks().map(|(n, _)| n));
        names.push("pool".to_string());
        names.push("logits".to_string());
        names
    }

    /// Checks that every block consumes its predecessor's channels.
    pub fn validate(&self) -> Result<()> {
        let mut c = self.stem.out_channels;
        for (name, cfg) in self.blocks() {
            cfg.validate()?;
            if cfg.in_channels != c {
                return Err(Error::InvalidConfig(format!(
                    "{name} expects {} input channels but receives {c}",
                    cfg.in_channels
                )));
            }
            c = cfg.out_channels;
        }
        if self.classes == 0 {
            return Err(Error::InvalidConfig("class count must be positive".into()));
        }
        Ok(())
    }

    /// The same topology with every block's split width and scale replaced
    /// by the family rule for `(width, scale)`.
    pub fn rescaled(&self, width: usize, scale: usize) -> Result<NetworkSpec> {
        let mut out = self.clone();
        for stage in &mut out.stages {
            for b in &mut stage.blocks {
                b.width = split_width(width, stage.planes, b.cardinality);
                b.scale = scale;
                if b.width == 0 {
                    return Err(Error::InvalidTemplate(format!("width {width} too small")));
                }
            }
        }
        Ok(out)
    }

    /// Line-oriented text form; see [`NetworkSpec::from_text`].
    pub fn to_text(&self) -> String {
        let s = &self.stem;
        let mut out = format!("network name={} classes={}\n", self.name, self.classes);
        out.push_str(&format!(
            "stem in={} out={} k={} stride={} maxpool={}\n",
            s.in_channels, s.out_channels, s.kernel, s.stride, s.max_pool as u8
        ));
        for stage in &self.stages {
            out.push_str(&format!("stage planes={}\n", stage.planes));
            for b in &stage.blocks {
                out.push_str(&format!(
                    "block in={} out={} w={} s={} c={} stride={} se={} r={} hier={}\n",
                    b.in_channels,
                    b.out_channels,
                    b.width,
                    b.scale,
                    b.cardinality,
                    b.stride,
                    b.use_se as u8,
                    b.se_ratio,
                    b.hierarchical as u8
                ));
            }
        }
        out
    }

    /// Parses the output of [`NetworkSpec::to_text`]. Blank lines and `#`
    /// comments are ignored.
    pub fn from_text(text: &str) -> Result<NetworkSpec> {
        let mut name = None;
        let mut classes = None;
        let mut stem = None;
        let mut stages: Vec<StageSpec> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let kind = tokens.next().unwrap_or_default();
            let fields: Vec<(&str, &str)> = tokens
                .map(|t| {
                    t.split_once('=')
                        .ok_or_else(|| parse_err(lineno, format!("expected key=value, got `{t}`")))
                })
                .collect::<Result<_>>()?;
            let get = |key: &str| -> Result<&str> {
                fields
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| parse_err(lineno, format!("missing `{key}`")))
            };
            let num = |key: &str| -> Result<usize> {
                get(key)?.parse().map_err(|_| {
                    parse_err(lineno, format!("`{key}` is not a non-negative integer"))
                })
            };
            let flag = |key: &str| -> Result<bool> {
                match get(key)? {
                    "0" | "false" => Ok(false),
                    "1" | "true" => Ok(true),
                    other => Err(parse_err(lineno, format!("`{key}={other}` is not a flag"))),
                }
            };
            match kind {
                "network" => {
                    name = Some(get("name")?.to_string());
                    classes = Some(num("classes")?);
                }
                "stem" => {
                    stem = Some(StemSpec {
                        in_channels: num("in")?,
                        out_channels: num("out")?,
                        kernel: num("k")?,
                        stride: num("stride")?,
                        max_pool: flag("maxpool")?,
                    })
                }
                "stage" => stages.push(StageSpec {
                    planes: num("planes")?,
                    blocks: Vec::new(),
                }),
                "block" => {
                    let cfg = Res2NetBlockConfig {
                        in_channels: num("in")?,
                        out_channels: num("out")?,
                        width: num("w")?,
                        scale: num("s")?,
                        cardinality: num("c")?,
                        stride: num("stride")?,
                        use_se: flag("se")?,
                        se_ratio: num("r")?,
                        hierarchical: flag("hier")?,
                    };
                    stages
                        .last_mut()
                        .ok_or_else(|| parse_err(lineno, "block before any stage".into()))?
                        .blocks
                        .push(cfg);
                }
                other => return Err(parse_err(lineno, format!("unknown layer kind `{other}`"))),
            }
        }
        let spec = NetworkSpec {
            name: name.ok_or_else(|| Error::Parse("missing `network` line".into()))?,
            classes: classes.unwrap_or_default(),
            stem: stem.ok_or_else(|| Error::Parse("missing `stem` line".into()))?,
            stages,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Runs the network on `x` and returns the logits `(N, classes, 1, 1)`.
    ///
    /// Marks `stem`, every block output (`stage{i}.{j}`), `pool` and `logits`
    /// as named activations on the graph.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = &self.stem;
        let mut h = g.conv_bn(
            "stem",
            x,
            ConvGeometry::new(s.stride, s.kernel / 2, 1),
            true,
        )?;
        if s.max_pool {
            h = g.tape.max_pool2d(h, PoolGeometry::new(3, 2, 1))?;
        }
        g.mark("stem", h);
        for (name, cfg) in self.blocks() {
            h = res2net_block_forward(g, h, cfg, &name)?.output;
            g.mark(name, h);
        }
        let pooled = g.tape.global_avg_pool(h)?;
        g.mark("pool", pooled);
        let logits = g.linear("fc", pooled)?;
        g.mark("logits", logits);
        Ok(logits)
    }
}

fn parse_err(lineno: usize, msg: String) -> Error {
    Error::Parse(format!("line {}: {msg}", lineno + 1))
}
