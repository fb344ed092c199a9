//! Backbone descriptions and the split point used for label injection.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Two 3x3 convolutions with an identity or 1x1 projection shortcut.
    Residual {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

/// A layer stack split into a feature extractor (`layers[..partition]`) and
/// a head (`layers[partition..]`). When `label_embed` is set, the second
/// input is mapped by a linear layer + LeakyReLU to one value per channel of
/// the extractor output and added to every spatial position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    pub n_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub partition: usize,
    pub label_embed: bool,
    pub leaky_slope: f64,
}

pub(crate) fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

impl LayerSpec {
    pub(crate) fn out_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = input;
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if in_channels != c {
                    return Err(config_err(format!(
                        "conv expects {in_channels} channels, got {c}"
                    )));
                }
                if stride == 0
                    || kernel == 0
                    || h + 2 * padding < kernel
                    || w + 2 * padding < kernel
                {
                    return Err(config_err(format!(
                        "conv kernel {kernel} does not fit a {h}x{w} input"
                    )));
                }
                Ok([
                    out_channels,
                    conv_out(h, kernel, stride, padding),
                    conv_out(w, kernel, stride, padding),
                ])
            }
            LayerSpec::Relu => Ok(input),
            LayerSpec::Residual {
                in_channels,
                out_channels,
                stride,
            } => {
                if in_channels != c {
                    return Err(config_err(format!(
                        "residual block expects {in_channels} channels, got {c}"
                    )));
                }
                if stride == 0 {
                    return Err(config_err("residual stride must be positive"));
                }
                Ok([
                    out_channels,
                    conv_out(h, 3, stride, 1),
                    conv_out(w, 3, stride, 1),
                ])
            }
            LayerSpec::GlobalAvgPool => Ok([c, 1, 1]),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if in_features != c * h * w {
                    return Err(config_err(format!(
                        "linear expects {in_features} inputs, got {}",
                        c * h * w
                    )));
                }
                Ok([out_features, 1, 1])
            }
        }
    }

    pub fn is_weighted(&self) -> bool {
        !matches!(self, LayerSpec::Relu | LayerSpec::GlobalAvgPool)
    }
}

impl Architecture {
    /// Small two-stage residual CNN, split between the stages.
    pub fn desk_resnet(input_shape: [usize; 3], n_classes: usize, width: usize) -> Self {
        let w = width;
        Self {
            input_shape,
            n_classes,
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: input_shape[0],
                    out_channels: w,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Residual {
                    in_channels: w,
                    out_channels: w,
                    stride: 1,
                },
                LayerSpec::Residual {
                    in_channels: w,
                    out_channels: 2 * w,
                    stride: 2,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Linear {
                    in_features: 2 * w,
                    out_features: n_classes,
                },
            ],
            partition: 3,
            label_embed: true,
            leaky_slope: 0.01,
        }
    }

    /// 18-layer residual net (stem + 8 blocks + head) split after the ninth
    /// weighted layer, i.e. after the second stage.
    pub fn resnet18(input_shape: [usize; 3], n_classes: usize, width: usize) -> Self {
        let w = width;
        let mut layers = vec![
            LayerSpec::Conv2d {
                in_channels: input_shape[0],
                out_channels: w,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
        ];
        let mut c = w;
        for (stage, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
            let out = w * mult;
            let stride = if stage == 0 { 1 } else { 2 };
            layers.push(LayerSpec::Residual {
                in_channels: c,
                out_channels: out,
                stride,
            });
            layers.push(LayerSpec::Residual {
                in_channels: out,
                out_channels: out,
                stride: 1,
            });
            c = out;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear {
            in_features: c,
            out_features: n_classes,
        });
        Self {
            input_shape,
            n_classes,
            layers,
            partition: 6,
            label_embed: true,
            leaky_slope: 0.01,
        }
    }

    /// Fully connected net: `in -> hidden -> hidden -> n_classes`, split after
    /// the first hidden layer.
    pub fn mlp(input_shape: [usize; 3], hidden: usize, n_classes: usize) -> Self {
        let d = input_shape.iter().product();
        Self {
            input_shape,
            n_classes,
            layers: vec![
                LayerSpec::Linear {
                    in_features: d,
                    out_features: hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: hidden,
                    out_features: hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: hidden,
                    out_features: n_classes,
                },
            ],
            partition: 2,
            label_embed: true,
            leaky_slope: 0.01,
        }
    }

    pub fn with_partition(mut self, partition: usize) -> Self {
        self.partition = partition;
        self
    }

    pub fn without_label_embed(mut self) -> Self {
        self.label_embed = false;
        self
    }

    /// Index of the layer the head starts at when splitting the net so that
    /// `weighted` weighted layers sit in the feature extractor.
    pub fn partition_after_weighted(&self, weighted: usize) -> Option<usize> {
        let mut seen = 0;
        for (i, l) in self.layers.iter().enumerate() {
            seen += match l {
                LayerSpec::Residual { .. } => 2,
                l if l.is_weighted() => 1,
                _ => 0,
            };
            if seen == weighted {
                // keep a trailing activation on the extractor side
                let mut p = i + 1;
                while matches!(self.layers.get(p), Some(LayerSpec::Relu)) {
                    p += 1;
                }
                return Some(p);
            }
            if seen > weighted {
                return None;
            }
        }
        None
    }

    /// Checks shapes end to end and returns every layer's output shape.
    pub fn shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.n_classes == 0 {
            return Err(config_err("n_classes must be positive"));
        }
        if self.partition == 0 || self.partition >= self.layers.len() {
            return Err(config_err(format!(
                "partition {} must fall strictly inside {} layers",
                self.partition,
                self.layers.len()
            )));
        }
        let mut shape = self.input_shape;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            shape = l.out_shape(shape)?;
            out.push(shape);
        }
        if shape != [self.n_classes, 1, 1] {
            return Err(config_err(format!(
                "network emits {shape:?}, expected {} logits",
                self.n_classes
            )));
        }
        Ok(out)
    }

    /// Channel count of the feature map the label embedding is added to.
    pub fn feature_channels(&self) -> Result<usize> {
        Ok(self.shapes()?[self.partition - 1][0])
    }
}
