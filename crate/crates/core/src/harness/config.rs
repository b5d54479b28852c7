use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::res2net::{build_network, NetworkSpec, Template};

/// What the CLI needs to build a network.
///
/// Written either as a preset name such as `res2net50-26w4s`,
/// `res2next29-6c24w4s`, `resnext29-8c64w`, `mini-4w4s` or `resnet50`
/// (optionally suffixed `-se`), or as a file of `key=value` lines with keys
/// `template`, `width`, `scale`, `cardinality`, `se` and `classes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub template: Template,
    pub classes: usize,
    pub se: bool,
}

impl ModelConfig {
    pub fn build(&self) -> Result<NetworkSpec> {
        build_network(&self.template, self.classes, self.se)
    }

    /// A preset name, or else the path of a `key=value` file.
    pub fn resolve(arg: &str) -> Result<Self> {
        if Path::new(arg).is_file() {
            return parse_key_values(&std::fs::read_to_string(arg)?);
        }
        arg.parse()
    }

    pub fn to_key_values(&self) -> String {
        let (width, scale, cardinality) = self.template.dims();
        format!(
            "template={}\nwidth={width}\nscale={scale}\ncardinality={cardinality}\nse={}\nclasses={}\n",
            family(&self.template),
            self.se,
            self.classes
        )
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.template)?;
        if self.se {
            write!(f, "-se")?;
        }
        Ok(())
    }
}

fn family(t: &Template) -> &'static str {
    match t {
        Template::ResNet50 => "resnet50",
        Template::Res2Net50 { .. } => "res2net50",
        Template::ResNeXt29 { .. } => "resnext29",
        Template::Res2NeXt29 { .. } => "res2next29",
        Template::Mini { .. } => "mini",
    }
}

fn default_classes(family: &str) -> usize {
    match family {
        "resnet50" | "res2net50" => 1000,
        "resnext29" | "res2next29" => 100,
        _ => 10,
    }
}

fn assemble(
    family: &str,
    w: Option<usize>,
    s: Option<usize>,
    c: Option<usize>,
) -> Result<Template> {
    let t = match family {
        "resnet50" => Template::ResNet50,
        "res2net50" => Template::Res2Net50 {
            width: w.unwrap_or(26),
            scale: s.unwrap_or(4),
            cardinality: c.unwrap_or(1),
        },
        "resnext29" => Template::ResNeXt29 {
            cardinality: c.unwrap_or(8),
            width: w.unwrap_or(64),
        },
        "res2next29" => Template::Res2NeXt29 {
            cardinality: c.unwrap_or(6),
            width: w.unwrap_or(24),
            scale: s.unwrap_or(4),
            depth: 29,
        },
        "mini" => Template::Mini {
            width: w.unwrap_or(4),
            scale: s.unwrap_or(4),
            cardinality: c.unwrap_or(1),
        },
        other => {
            return Err(Error::InvalidTemplate(format!(
                "unknown template `{other}`"
            )))
        }
    };
    Ok(t)
}

/// Splits `26w4s2c` into `[(26, 'w'), (4, 's'), (2, 'c')]`.
fn dims_suffix(s: &str) -> Result<Vec<(usize, char)>> {
    let mut out = Vec::new();
    let mut digits = String::new();
    for ch in s.chars() {
        if ch.is_ascii_digit() {
            digits.push(ch);
        } else {
            let v = digits.parse().map_err(|_| {
                Error::InvalidTemplate(format!("expected a number before `{ch}` in `{s}`"))
            })?;
            out.push((v, ch));
            digits.clear();
        }
    }
    if !digits.is_empty() {
        return Err(Error::InvalidTemplate(format!("trailing number in `{s}`")));
    }
    Ok(out)
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(name: &str) -> Result<Self> {
        let (base, se) = match name.strip_suffix("-se") {
            Some(b) => (b, true),
            None => (name, false),
        };
        let (fam, dims) = base.split_once('-').unwrap_or((base, ""));
        let (mut w, mut s, mut c, mut d) = (None, None, None, None);
        for (v, unit) in dims_suffix(dims)? {
            let slot = match unit {
                'w' => &mut w,
                's' => &mut s,
                'c' => &mut c,
                'd' => &mut d,
                other => {
                    return Err(Error::InvalidTemplate(format!(
                        "unknown dimension `{other}` in `{name}`"
                    )))
                }
            };
            *slot = Some(v);
        }
        let (fam, depth) = match fam {
            "res2next29" | "resnext29" => (fam, d.unwrap_or(29)),
            f if f.starts_with("res2next") => ("res2next29", f[8..].parse().unwrap_or(0)),
            f => (f, d.unwrap_or(29)),
        };
        let mut template = assemble(fam, w, s, c)?;
        if let Template::Res2NeXt29 {
            depth: ref mut dd, ..
        } = template
        {
            *dd = depth;
        }
        let cfg = ModelConfig {
            template,
            classes: default_classes(fam),
            se,
        };
        cfg.build()?;
        Ok(cfg)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<ModelConfig> {
    let (mut fam, mut w, mut s, mut c, mut se, mut classes) = (None, None, None, None, false, None);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        let num = || -> Result<usize> {
            v.parse().map_err(|_| {
                Error::Parse(format!(
                    "line {}: `{k}` needs a non-negative integer",
                    i + 1
                ))
            })
        };
        match k {
            "template" => fam = Some(v.to_string()),
            "width" => w = Some(num()?),
            "scale" => s = Some(num()?),
            "cardinality" => c = Some(num()?),
            "classes" => classes = Some(num()?),
            "se" => {
                se = match v {
                    "true" | "1" | "on" => true,
                    "false" | "0" | "off" => false,
                    _ => {
                        return Err(Error::Parse(format!(
                            "line {}: `se` must be true or false",
                            i + 1
                        )))
                    }
                }
            }
            other => {
                return Err(Error::Parse(format!(
                    "line {}: unknown key `{other}`",
                    i + 1
                )))
            }
        }
    }
    let fam = fam.ok_or_else(|| Error::Parse("missing `template`".into()))?;
    let cfg = ModelConfig {
        template: assemble(&fam, w, s, c)?,
        classes: classes.unwrap_or_else(|| default_classes(&fam)),
        se,
    };
    cfg.build()?;
    Ok(cfg)
}
