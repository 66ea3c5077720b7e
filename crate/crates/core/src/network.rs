//! Layer descriptions shared by the ANN and the converted SNN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.stride == 0 || ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d(ConvSpec),
    Linear {
        n_in: usize,
        n_out: usize,
    },
    /// 2x2 average pooling with stride 2.
    Avgpool2x2,
    Dropout {
        p: f64,
    },
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Conv2d(_) | LayerSpec::Linear { .. })
    }

    pub fn fan_in(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv2d(c) => Some(c.fan_in()),
            LayerSpec::Linear { n_in, .. } => Some(*n_in),
            _ => None,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerSpec::Conv2d(c) => Some(c.weight_shape().to_vec()),
            LayerSpec::Linear { n_in, n_out } => Some(vec![*n_out, *n_in]),
            _ => None,
        }
    }

    /// Output channels (conv) or output features (linear).
    pub fn out_channels(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv2d(c) => Some(c.out_channels),
            LayerSpec::Linear { n_out, .. } => Some(*n_out),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Avgpool2x2 => "avgpool2x2",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }
}

/// Per-sample activation shape: `[C, H, W]` for feature maps, `[N]` once flattened.
pub type ActShape = Vec<usize>;

/// An ordered feed-forward topology. The last layer must be a linear
/// classifier; every earlier weighted layer becomes a spiking layer after
/// conversion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// `[channels, height, width]` of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks layer compatibility and returns the per-sample input shape of
    /// every layer followed by the network output shape.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        if self.input.contains(&0) {
            return Err(Error::Config(format!(
                "input shape {:?} has a zero dimension",
                self.input
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur: ActShape = self.input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            shapes.push(cur.clone());
            cur = match *layer {
                LayerSpec::Conv2d(c) => {
                    if cur.len() != 3 {
                        return Err(Error::layer(i, "conv2d after a flattened layer"));
                    }
                    if cur[0] != c.in_channels {
                        return Err(Error::layer(
                            i,
                            format!("conv2d expects {} input channels, got {}", c.in_channels, cur[0]),
                        ));
                    }
                    if c.stride == 0 {
                        return Err(Error::layer(i, "stride must be at least 1"));
                    }
                    let (h, w) = c
                        .output_hw(cur[1], cur[2])
                        .ok_or_else(|| Error::layer(i, format!("kernel larger than padded input {cur:?}")))?;
                    vec![c.out_channels, h, w]
                }
                LayerSpec::Linear { n_in, n_out } => {
                    let flat: usize = cur.iter().product();
                    if flat != n_in {
                        return Err(Error::layer(
                            i,
                            format!("linear expects {n_in} inputs, previous layer yields {flat}"),
                        ));
                    }
                    vec![n_out]
                }
                LayerSpec::Avgpool2x2 => {
                    if cur.len() != 3 || !cur[1].is_multiple_of(2) || !cur[2].is_multiple_of(2) {
                        return Err(Error::layer(
                            i,
                            format!("avgpool2x2 needs even spatial dims, got {cur:?}"),
                        ));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerSpec::Dropout { p } => {
                    if !(0.0..1.0).contains(&p) {
                        return Err(Error::layer(i, format!("dropout probability {p} outside [0, 1)")));
                    }
                    cur
                }
            };
        }
        shapes.push(cur);
        Ok(shapes)
    }

    /// Full validation: shapes, a linear classifier as the last layer, and at
    /// least two output classes.
    pub fn validate(&self) -> Result<()> {
        self.shapes()?;
        match self.layers.last() {
            Some(LayerSpec::Linear { n_out, .. }) if *n_out >= 2 => Ok(()),
            Some(LayerSpec::Linear { .. }) => Err(Error::layer(
                self.layers.len() - 1,
                "classifier needs at least 2 outputs",
            )),
            _ => Err(Error::Config("the last layer must be a linear classifier".into())),
        }
    }

    /// Indices into `layers` of the weighted layers, in order.
    pub fn weighted_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_weighted())
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of spiking (hidden weighted) layers after conversion.
    pub fn spiking_layers(&self) -> usize {
        self.weighted_layers().len().saturating_sub(1)
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Linear { n_out, .. }) => *n_out,
            _ => 0,
        }
    }

    /// Two conv blocks with pooling and a small fully connected head.
    pub fn conv_small(input: [usize; 3], classes: usize) -> Self {
        let [c, h, w] = input;
        let flat = 16 * (h / 4) * (w / 4);
        NetworkSpec {
            name: "conv-small".into(),
            input,
            layers: vec![
                LayerSpec::Conv2d(ConvSpec::same(c, 8, 3)),
                LayerSpec::Avgpool2x2,
                LayerSpec::Conv2d(ConvSpec::same(8, 16, 3)),
                LayerSpec::Avgpool2x2,
                LayerSpec::Linear { n_in: flat, n_out: 64 },
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::Linear {
                    n_in: 64,
                    n_out: classes,
                },
            ],
        }
    }

    /// VGG6 layout `{64, A, 128, 128, A}, Linear` with widths divided by four.
    pub fn vgg6_mini(input: [usize; 3], classes: usize) -> Self {
        let [c, h, w] = input;
        let flat = 32 * (h / 4) * (w / 4);
        NetworkSpec {
            name: "vgg6-mini".into(),
            input,
            layers: vec![
                LayerSpec::Conv2d(ConvSpec::same(c, 16, 3)),
                LayerSpec::Avgpool2x2,
                LayerSpec::Conv2d(ConvSpec::same(16, 32, 3)),
                LayerSpec::Conv2d(ConvSpec::same(32, 32, 3)),
                LayerSpec::Avgpool2x2,
                LayerSpec::Linear { n_in: flat, n_out: 128 },
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::Linear { n_in: 128, n_out: 128 },
                LayerSpec::Dropout { p: 0.5 },
                LayerSpec::Linear {
                    n_in: 128,
                    n_out: classes,
                },
            ],
        }
    }

    /// Fully connected stack with `depth` hidden layers of `width` units.
    pub fn deep_mlp(input: [usize; 3], classes: usize, depth: usize, width: usize) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut n_in: usize = input.iter().product();
        for _ in 0..depth {
            layers.push(LayerSpec::Linear { n_in, n_out: width });
            n_in = width;
        }
        layers.push(LayerSpec::Linear { n_in, n_out: classes });
        NetworkSpec {
            name: format!("deep-mlp-{depth}x{width}"),
            input,
            layers,
        }
    }

    /// Resolves one of the built-in architecture names.
    pub fn builtin(name: &str, input: [usize; 3], classes: usize) -> Option<Self> {
        match name {
            "conv-small" => Some(Self::conv_small(input, classes)),
            "vgg6-mini" => Some(Self::vgg6_mini(input, classes)),
            "deep-mlp" => Some(Self::deep_mlp(input, classes, 8, 64)),
            _ => None,
        }
    }
}
