//! Declarative description of a multi-head network.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of the layer list. Every head ends with an implicit linear
/// classifier onto `num_classes` outputs, which is not part of this list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// 3x3-style convolution (padding `kernel / 2`, no bias), batch norm, ReLU.
    ConvBnRelu {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    /// A group of basic residual blocks. The first block applies `stride` and
    /// gets a 1x1 convolution + batch-norm projection whenever the shape changes.
    ResidualGroup {
        out_channels: usize,
        blocks: usize,
        stride: usize,
    },
    /// Fully connected layer followed by ReLU. Flattens its input.
    Dense { out_features: usize },
    /// Global average pooling over the spatial dimensions.
    AvgPool,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::ConvBnRelu {
                out_channels,
                kernel,
                stride,
            } => write!(f, "conv:{out_channels}:{kernel}:{stride}"),
            LayerSpec::ResidualGroup {
                out_channels,
                blocks,
                stride,
            } => write!(f, "res:{out_channels}:{blocks}:{stride}"),
            LayerSpec::Dense { out_features } => write!(f, "dense:{out_features}"),
            LayerSpec::AvgPool => write!(f, "avgpool"),
        }
    }
}

impl LayerSpec {
    fn parse(item: &str) -> Result<Self> {
        let parts: Vec<&str> = item.trim().split(':').map(str::trim).collect();
        let num = |i: usize| -> Result<usize> {
            let raw = parts
                .get(i)
                .ok_or_else(|| Error::config(format!("layer `{item}` is missing field {i}")))?;
            raw.parse::<usize>()
                .map_err(|_| Error::config(format!("layer `{item}`: `{raw}` is not a count")))
        };
        let arity = |n: usize| -> Result<()> {
            if parts.len() != n {
                return Err(Error::config(format!(
                    "layer `{item}` takes {} fields, got {}",
                    n - 1,
                    parts.len() - 1
                )));
            }
            Ok(())
        };
        match parts[0] {
            "conv" => {
                arity(4)?;
                Ok(LayerSpec::ConvBnRelu {
                    out_channels: num(1)?,
                    kernel: num(2)?,
                    stride: num(3)?,
                })
            }
            "res" => {
                arity(4)?;
                Ok(LayerSpec::ResidualGroup {
                    out_channels: num(1)?,
                    blocks: num(2)?,
                    stride: num(3)?,
                })
            }
            "dense" => {
                arity(2)?;
                Ok(LayerSpec::Dense { out_features: num(1)? })
            }
            "avgpool" => {
                arity(1)?;
                Ok(LayerSpec::AvgPool)
            }
            other => Err(Error::config(format!("unknown layer kind `{other}`"))),
        }
    }
}

/// Parses a comma-separated layer list such as `conv:16:3:1, res:16:18:1, avgpool`.
/// An empty string is an empty list.
pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
    let text = text.trim();
    if text.is_empty() || text == "none" {
        return Ok(Vec::new());
    }
    text.split(',').map(LayerSpec::parse).collect()
}

pub fn render_layers(layers: &[LayerSpec]) -> String {
    if layers.is_empty() {
        return "none".to_string();
    }
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Named layer lists.
pub fn preset_layers(name: &str) -> Option<Vec<LayerSpec>> {
    use LayerSpec::*;
    let layers = match name {
        // 6n+2 = 110 with n = 18 basic blocks per stage.
        "resnet110" => vec![
            ConvBnRelu {
                out_channels: 16,
                kernel: 3,
                stride: 1,
            },
            ResidualGroup {
                out_channels: 16,
                blocks: 18,
                stride: 1,
            },
            ResidualGroup {
                out_channels: 32,
                blocks: 18,
                stride: 2,
            },
            ResidualGroup {
                out_channels: 64,
                blocks: 18,
                stride: 2,
            },
            AvgPool,
        ],
        "desk-resnet" => vec![
            ConvBnRelu {
                out_channels: 8,
                kernel: 3,
                stride: 1,
            },
            ResidualGroup {
                out_channels: 8,
                blocks: 1,
                stride: 1,
            },
            ResidualGroup {
                out_channels: 16,
                blocks: 1,
                stride: 2,
            },
            ResidualGroup {
                out_channels: 32,
                blocks: 1,
                stride: 2,
            },
            AvgPool,
        ],
        "desk-mlp" => vec![
            Dense { out_features: 32 },
            Dense { out_features: 32 },
            Dense { out_features: 32 },
        ],
        "linear" => Vec::new(),
        _ => return None,
    };
    Some(layers)
}

/// Layer list from either a preset name or an explicit list.
pub fn layers_from_text(text: &str) -> Result<Vec<LayerSpec>> {
    match preset_layers(text.trim()) {
        Some(layers) => Ok(layers),
        None => parse_layers(text),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        InputShape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parses `CxHxW`.
    pub fn parse(text: &str) -> Result<Self> {
        let dims: Vec<usize> = text
            .trim()
            .split('x')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("input shape `{text}` is not CxHxW")))?;
        if dims.len() != 3 {
            return Err(Error::config(format!("input shape `{text}` is not CxHxW")));
        }
        Ok(InputShape::new(dims[0], dims[1], dims[2]))
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub layers: Vec<LayerSpec>,
    /// Number of leading layers shared by all heads. `0` makes every head a
    /// complete independent network.
    pub split_index: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub input_shape: InputShape,
}

impl ArchitectureSpec {
    pub fn new(
        layers: Vec<LayerSpec>,
        split_index: usize,
        num_heads: usize,
        num_classes: usize,
        input_shape: InputShape,
    ) -> Result<Self> {
        let spec = ArchitectureSpec {
            layers,
            split_index,
            num_heads,
            num_classes,
            input_shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// CIFAR-10 ResNet-110 with heads branching after the second residual group.
    pub fn resnet110(num_heads: usize) -> Self {
        ArchitectureSpec {
            layers: preset_layers("resnet110").expect("preset exists"),
            split_index: 3,
            num_heads,
            num_classes: 10,
            input_shape: InputShape::new(3, 32, 32),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(Error::config("number of heads must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("number of classes must be positive"));
        }
        if self.split_index > self.layers.len() {
            return Err(Error::config(format!(
                "split index {} is past the last layer boundary ({})",
                self.split_index,
                self.layers.len()
            )));
        }
        if self.input_shape.is_empty() {
            return Err(Error::config("input shape has a zero dimension"));
        }
        self.shapes().map(|_| ())
    }

    /// Activation shapes at every layer boundary, starting with the input.
    pub fn shapes(&self) -> Result<Vec<InputShape>> {
        let mut shapes = vec![self.input_shape];
        let mut cur = self.input_shape;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::ConvBnRelu {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    check_conv(i, out_channels, kernel, stride)?;
                    conv_out(cur, out_channels, kernel, stride)
                }
                LayerSpec::ResidualGroup {
                    out_channels,
                    blocks,
                    stride,
                } => {
                    check_conv(i, out_channels, 3, stride)?;
                    if blocks == 0 {
                        return Err(Error::config(format!("layer {i}: residual group has no blocks")));
                    }
                    conv_out(cur, out_channels, 3, stride)
                }
                LayerSpec::Dense { out_features } => {
                    if out_features == 0 {
                        return Err(Error::config(format!("layer {i}: dense layer has no outputs")));
                    }
                    InputShape::new(out_features, 1, 1)
                }
                LayerSpec::AvgPool => InputShape::new(cur.channels, 1, 1),
            };
            if cur.is_empty() {
                return Err(Error::config(format!("layer {i} produces an empty activation")));
            }
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn backbone_layers(&self) -> &[LayerSpec] {
        &self.layers[..self.split_index]
    }

    pub fn head_layers(&self) -> &[LayerSpec] {
        &self.layers[self.split_index..]
    }

    /// Same layers as a conventional single-headed network.
    pub fn single(&self) -> Self {
        ArchitectureSpec {
            num_heads: 1,
            ..self.clone()
        }
    }

    /// Canonical text used for checkpoint compatibility hashes.
    pub fn canonical(&self) -> String {
        format!(
            "layers={};split={};heads={};classes={};input={}",
            render_layers(&self.layers),
            self.split_index,
            self.num_heads,
            self.num_classes,
            self.input_shape
        )
    }
}

fn check_conv(i: usize, out: usize, kernel: usize, stride: usize) -> Result<()> {
    if out == 0 || kernel == 0 || stride == 0 {
        return Err(Error::config(format!(
            "layer {i}: channels, kernel and stride must all be positive"
        )));
    }
    Ok(())
}

pub(crate) fn conv_out(cur: InputShape, out: usize, kernel: usize, stride: usize) -> InputShape {
    let pad = kernel / 2;
    let h = (cur.height + 2 * pad).saturating_sub(kernel) / stride + 1;
    let w = (cur.width + 2 * pad).saturating_sub(kernel) / stride + 1;
    InputShape::new(out, h, w)
}
