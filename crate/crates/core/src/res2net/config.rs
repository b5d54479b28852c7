use crate::error::{Error, Result};

pub const DEFAULT_SE_RATIO: usize = 16;

/// Shape of one residual block.
///
/// `width` is the channel count of each of the `scale` splits, so the block's
/// internal width is `scale · width`. Each 3×3 convolution inside the block
/// runs with `cardinality` groups. `scale == 1` is the plain bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Res2NetBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub scale: usize,
    pub cardinality: usize,
    pub stride: usize,
    pub use_se: bool,
    pub se_ratio: usize,
    /// Chain splits as `y_i = K_i(x_i + y_{i-1})`. Strided blocks always use
    /// the parallel form `y_i = K_i(x_i)` because `y_{i-1}` is already
    /// downsampled; this flag can force the parallel form at stride 1 too.
    pub hierarchical: bool,
}

impl Res2NetBlockConfig {
    pub fn new(in_channels: usize, out_channels: usize, width: usize, scale: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            width,
            scale,
            cardinality: 1,
            stride: 1,
            use_se: false,
            se_ratio: DEFAULT_SE_RATIO,
            hierarchical: true,
        }
    }

    pub fn with_cardinality(mut self, c: usize) -> Self {
        self.cardinality = c;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_se(mut self, on: bool) -> Self {
        self.use_se = on;
        self
    }

    pub fn with_se_ratio(mut self, r: usize) -> Self {
        self.se_ratio = r;
        self
    }

    pub fn with_hierarchical(mut self, on: bool) -> Self {
        self.hierarchical = on;
        self
    }

    /// `n = s · w`.
    pub fn internal_channels(&self) -> usize {
        self.scale * self.width
    }

    pub fn se_hidden(&self) -> usize {
        (self.out_channels / self.se_ratio.max(1)).max(1)
    }

    pub fn uses_hierarchy(&self) -> bool {
        self.hierarchical && self.stride == 1 && self.scale > 2
    }

    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.width == 0 || self.scale == 0 {
            return bad(format!(
                "width {} and scale {} must be positive",
                self.width, self.scale
            ));
        }
        if self.cardinality == 0 || !self.width.is_multiple_of(self.cardinality) {
            return Err(Error::NonDivisibleChannels {
                channels: self.width,
                divisor: self.cardinality,
            });
        }
        if self.stride != 1 && self.stride != 2 {
            return bad(format!("stride {} not in {{1, 2}}", self.stride));
        }
        if self.use_se && self.se_ratio == 0 {
            return bad("SE ratio must be positive".into());
        }
        Ok(())
    }
}
