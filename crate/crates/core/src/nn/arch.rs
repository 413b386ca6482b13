use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of an architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fully connected layer. Flattens its input.
    Dense {
        units: usize,
    },
    /// Square-kernel convolution, stride 1, valid padding.
    Conv {
        filters: usize,
        kernel: usize,
    },
    Relu,
    /// Non-overlapping max pooling with a square window.
    MaxPool {
        size: usize,
    },
    Flatten,
}

/// Network description: input sample shape plus the layer stack.
///
/// `input_shape` is `[features]` for flat inputs or `[channels, height, width]`
/// for images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// Resolved operation with concrete input/output shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Op {
    Dense {
        inputs: usize,
        outputs: usize,
        param: usize,
    },
    Conv {
        in_channels: usize,
        height: usize,
        width: usize,
        filters: usize,
        kernel: usize,
        param: usize,
    },
    Relu,
    MaxPool {
        channels: usize,
        height: usize,
        width: usize,
        size: usize,
    },
}

/// Shape of a parameter tensor together with its name and fan-in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Plan {
    pub ops: Vec<Op>,
    pub params: Vec<ParamSpec>,
    pub input_len: usize,
}

impl Architecture {
    pub fn mlp(inputs: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Dense { units: h });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { units: num_classes });
        Architecture {
            input_shape: vec![inputs],
            num_classes,
            layers,
        }
    }

    /// LeNet-5 style network for 28x28 grayscale digits.
    pub fn lenet_small() -> Self {
        use LayerSpec::*;
        Architecture {
            input_shape: vec![1, 28, 28],
            num_classes: 10,
            layers: vec![
                Conv { filters: 6, kernel: 5 },
                Relu,
                MaxPool { size: 2 },
                Conv { filters: 16, kernel: 5 },
                Relu,
                MaxPool { size: 2 },
                Flatten,
                Dense { units: 120 },
                Relu,
                Dense { units: 84 },
                Relu,
                Dense { units: 10 },
            ],
        }
    }

    /// Two 5x5 conv + ReLU + 2x2 max-pool blocks followed by two 384-unit
    /// fully connected layers, for 32x32 RGB images.
    pub fn cifar_conv(filters: usize) -> Self {
        use LayerSpec::*;
        Architecture {
            input_shape: vec![3, 32, 32],
            num_classes: 10,
            layers: vec![
                Conv { filters, kernel: 5 },
                Relu,
                MaxPool { size: 2 },
                Conv { filters, kernel: 5 },
                Relu,
                MaxPool { size: 2 },
                Flatten,
                Dense { units: 384 },
                Relu,
                Dense { units: 384 },
                Relu,
                Dense { units: 10 },
            ],
        }
    }

    /// Named presets accepted on the command line.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mlp" => Ok(Self::mlp(784, &[256], 10)),
            "lenet-small" => Ok(Self::lenet_small()),
            "cifar-conv" => Ok(Self::cifar_conv(32)),
            other => Err(Error::Config(format!(
                "unknown architecture preset `{other}` (expected mlp, lenet-small or cifar-conv)"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Architecture =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("architecture descriptor: {e}")))?;
        arch.plan()?;
        Ok(arch)
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        Ok(self.plan()?.params)
    }

    pub(crate) fn plan(&self) -> Result<Plan> {
        if self.layers.is_empty() {
            return Err(Error::Config("architecture has no layers".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        // Current activation: either spatial (c, h, w) or flat (n).
        enum Act {
            Spatial(usize, usize, usize),
            Flat(usize),
        }
        let mut act = match self.input_shape[..] {
            [n] => Act::Flat(n),
            [c, h, w] => Act::Spatial(c, h, w),
            _ => {
                return Err(Error::Config(format!(
                    "input shape must be [features] or [channels, height, width], got {:?}",
                    self.input_shape
                )))
            }
        };
        let mut ops = Vec::new();
        let mut params = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(Error::Config(format!("layer {idx}: dense layer with zero units")));
                    }
                    let inputs = match act {
                        Act::Flat(n) => n,
                        Act::Spatial(c, h, w) => c * h * w,
                    };
                    let param = params.len();
                    params.push(ParamSpec {
                        name: format!("dense{idx}.weight"),
                        shape: vec![units, inputs],
                        fan_in: inputs,
                    });
                    params.push(ParamSpec {
                        name: format!("dense{idx}.bias"),
                        shape: vec![units],
                        fan_in: inputs,
                    });
                    ops.push(Op::Dense {
                        inputs,
                        outputs: units,
                        param,
                    });
                    act = Act::Flat(units);
                }
                LayerSpec::Conv { filters, kernel } => {
                    let Act::Spatial(c, h, w) = act else {
                        return Err(Error::Config(format!("layer {idx}: convolution needs a spatial input")));
                    };
                    if filters == 0 || kernel == 0 || kernel > h || kernel > w {
                        return Err(Error::Config(format!(
                            "layer {idx}: kernel {kernel} / filters {filters} invalid for {h}x{w} input"
                        )));
                    }
                    let param = params.len();
                    params.push(ParamSpec {
                        name: format!("conv{idx}.weight"),
                        shape: vec![filters, c, kernel, kernel],
                        fan_in: c * kernel * kernel,
                    });
                    params.push(ParamSpec {
                        name: format!("conv{idx}.bias"),
                        shape: vec![filters],
                        fan_in: c * kernel * kernel,
                    });
                    ops.push(Op::Conv {
                        in_channels: c,
                        height: h,
                        width: w,
                        filters,
                        kernel,
                        param,
                    });
                    act = Act::Spatial(filters, h - kernel + 1, w - kernel + 1);
                }
                LayerSpec::Relu => ops.push(Op::Relu),
                LayerSpec::MaxPool { size } => {
                    let Act::Spatial(c, h, w) = act else {
                        return Err(Error::Config(format!("layer {idx}: max-pool needs a spatial input")));
                    };
                    if size == 0 || size > h || size > w {
                        return Err(Error::Config(format!(
                            "layer {idx}: pool size {size} invalid for {h}x{w}"
                        )));
                    }
                    ops.push(Op::MaxPool {
                        channels: c,
                        height: h,
                        width: w,
                        size,
                    });
                    act = Act::Spatial(c, h / size, w / size);
                }
                LayerSpec::Flatten => {
                    if let Act::Spatial(c, h, w) = act {
                        act = Act::Flat(c * h * w);
                    }
                }
            }
        }
        match act {
            Act::Flat(n) if n == self.num_classes => {}
            Act::Flat(n) => {
                return Err(Error::Config(format!(
                    "network emits {n} outputs but num_classes is {}",
                    self.num_classes
                )))
            }
            Act::Spatial(..) => return Err(Error::Config("network must end in a flat layer".into())),
        }
        if params.is_empty() {
            return Err(Error::Config("architecture has no trainable layers".into()));
        }
        Ok(Plan {
            ops,
            params,
            input_len: self.input_len(),
        })
    }
}
