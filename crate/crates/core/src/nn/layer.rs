use std::fmt;

use serde::{Deserialize, Serialize};

/// One layer of a branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    AvgPool2d {
        pool: usize,
        stride: usize,
    },
    /// Inverted dropout at the network's rate.
    Dropout,
    Flatten,
    /// Joins the two branch outputs; only valid as the first head layer.
    Concat,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            dilation: 1,
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Dropout => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Concat => "concat",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Kernel and bias shapes, for weight layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels])),
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(k, b)| k.iter().product::<usize>() + b.iter().product::<usize>())
            .unwrap_or(0)
    }
}

/// Activation shape of a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Map { channels: usize, height: usize, width: usize },
    Flat(usize),
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Map {
                channels,
                height,
                width,
            } => channels * height * width,
            Shape::Flat(n) => n,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Map {
                channels,
                height,
                width,
            } => write!(f, "{height}x{width}x{channels}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}
