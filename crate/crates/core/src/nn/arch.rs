use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network architectures.
///
/// Both use smooth activations so gradient-matching objectives stay
/// differentiable in the input: `tanh` in the MLP and sigmoid in the CNN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    /// `input -> dense(hidden) -> tanh -> dense(classes)`
    Mlp {
        height: usize,
        width: usize,
        channels: usize,
        hidden: usize,
        classes: usize,
    },
    /// `conv5x5(conv1) -> sigmoid -> avgpool2 -> conv5x5(conv2) -> sigmoid -> avgpool2 -> dense(classes)`,
    /// convolutions zero-padded to keep spatial size.
    LenetSmall {
        height: usize,
        width: usize,
        channels: usize,
        conv1: usize,
        conv2: usize,
        classes: usize,
    },
}

pub const LENET_KERNEL: usize = 5;
pub const DEFAULT_MLP_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    Conv { in_channels: usize, out_channels: usize, kernel: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub kind: LayerKind,
    pub weight_offset: usize,
    pub weight_len: usize,
    pub bias_offset: usize,
    pub bias_len: usize,
}

impl LayerLayout {
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
        }
    }
}

/// One step of the forward computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Op {
    Dense { layer: usize },
    /// Same-padded stride-1 convolution on a `(channels, height, width)` map.
    Conv { layer: usize, height: usize, width: usize },
    Tanh,
    Sigmoid,
    AvgPool2 { channels: usize, height: usize, width: usize },
}

impl Architecture {
    pub fn mlp(height: usize, width: usize, channels: usize, hidden: usize, classes: usize) -> Self {
        Architecture::Mlp { height, width, channels, hidden, classes }
    }

    pub fn lenet_small(height: usize, width: usize, channels: usize, classes: usize) -> Self {
        Architecture::LenetSmall { height, width, channels, conv1: 4, conv2: 8, classes }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        match *self {
            Architecture::Mlp { height, width, channels, hidden, classes } => {
                positive("height", height)?;
                positive("width", width)?;
                positive("channels", channels)?;
                positive("hidden", hidden)?;
                positive("classes", classes)?;
            }
            Architecture::LenetSmall { height, width, channels, conv1, conv2, classes } => {
                positive("channels", channels)?;
                positive("conv1", conv1)?;
                positive("conv2", conv2)?;
                positive("classes", classes)?;
                if height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0 {
                    return Err(Error::Config(format!(
                        "lenet-small needs height and width divisible by 4, got {height}x{width}"
                    )));
                }
            }
        }
        if self.classes() < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        match *self {
            Architecture::Mlp { height, width, channels, .. }
            | Architecture::LenetSmall { height, width, channels, .. } => (height, width, channels),
        }
    }

    pub fn input_len(&self) -> usize {
        let (h, w, c) = self.input_shape();
        h * w * c
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Mlp { classes, .. } | Architecture::LenetSmall { classes, .. } => classes,
        }
    }

    pub fn is_mlp(&self) -> bool {
        matches!(self, Architecture::Mlp { .. })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::Mlp { .. } => "mlp",
            Architecture::LenetSmall { .. } => "lenet-small",
        }
    }

    /// Parameter layout, layer by layer in declaration order, weights before biases.
    pub fn layout(&self) -> Vec<LayerLayout> {
        let kinds = match *self {
            Architecture::Mlp { hidden, classes, .. } => vec![
                LayerKind::Dense { inputs: self.input_len(), outputs: hidden },
                LayerKind::Dense { inputs: hidden, outputs: classes },
            ],
            Architecture::LenetSmall { height, width, channels, conv1, conv2, classes } => vec![
                LayerKind::Conv { in_channels: channels, out_channels: conv1, kernel: LENET_KERNEL },
                LayerKind::Conv { in_channels: conv1, out_channels: conv2, kernel: LENET_KERNEL },
                LayerKind::Dense { inputs: conv2 * (height / 4) * (width / 4), outputs: classes },
            ],
        };
        let mut offset = 0;
        kinds
            .into_iter()
            .map(|kind| {
                let (weight_len, bias_len) = match kind {
                    LayerKind::Dense { inputs, outputs } => (inputs * outputs, outputs),
                    LayerKind::Conv { in_channels, out_channels, kernel } => {
                        (out_channels * in_channels * kernel * kernel, out_channels)
                    }
                };
                let layout = LayerLayout {
                    kind,
                    weight_offset: offset,
                    weight_len,
                    bias_offset: offset + weight_len,
                    bias_len,
                };
                offset += weight_len + bias_len;
                layout
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|l| l.weight_len + l.bias_len).sum()
    }

    pub(crate) fn ops(&self) -> Vec<Op> {
        match *self {
            Architecture::Mlp { .. } => vec![Op::Dense { layer: 0 }, Op::Tanh, Op::Dense { layer: 1 }],
            Architecture::LenetSmall { height, width, conv1, conv2, .. } => vec![
                Op::Conv { layer: 0, height, width },
                Op::Sigmoid,
                Op::AvgPool2 { channels: conv1, height, width },
                Op::Conv { layer: 1, height: height / 2, width: width / 2 },
                Op::Sigmoid,
                Op::AvgPool2 { channels: conv2, height: height / 2, width: width / 2 },
                Op::Dense { layer: 2 },
            ],
        }
    }

    /// Parses the descriptor produced by `Display`.
    pub fn parse_descriptor(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let tag = parts.next().ok_or_else(|| Error::Config("empty architecture descriptor".into()))?;
        let mut fields = std::collections::BTreeMap::new();
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed descriptor field {part:?}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Config(format!("descriptor field {k} is not an integer: {v:?}")))?;
            fields.insert(k.to_string(), v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Config(format!("descriptor missing field {k}")))
        };
        let arch = match tag {
            "mlp" => Architecture::Mlp {
                height: get("height")?,
                width: get("width")?,
                channels: get("channels")?,
                hidden: get("hidden")?,
                classes: get("classes")?,
            },
            "lenet-small" => Architecture::LenetSmall {
                height: get("height")?,
                width: get("width")?,
                channels: get("channels")?,
                conv1: get("conv1")?,
                conv2: get("conv2")?,
                classes: get("classes")?,
            },
            other => return Err(Error::Config(format!("unknown architecture {other:?}"))),
        };
        arch.validate()?;
        Ok(arch)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Architecture::Mlp { height, width, channels, hidden, classes } => write!(
                f,
                "mlp height={height} width={width} channels={channels} hidden={hidden} classes={classes}"
            ),
            Architecture::LenetSmall { height, width, channels, conv1, conv2, classes } => write!(
                f,
                "lenet-small height={height} width={width} channels={channels} conv1={conv1} conv2={conv2} classes={classes}"
            ),
        }
    }
}
