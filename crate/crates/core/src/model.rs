//! The two-branch architecture: a convolutional branch over the terrain
//! patch, a dense branch over the location triple, and a dense head that
//! emits `(mu, log_var)`.

use serde::{Deserialize, Serialize};

use crate::nn::{branch_output_shape, LayerSpec, Network, NnError, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub patch_channels: usize,
    pub patch_size: usize,
    pub location_inputs: usize,
    pub conv_branch: Vec<LayerSpec>,
    pub dense_branch: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
    pub dropout_rate: f64,
}

impl NetworkSpec {
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.conv_branch.iter().chain(&self.dense_branch).chain(&self.head)
    }

    pub fn with_dropout_rate(&self, rate: f64) -> Self {
        NetworkSpec {
            dropout_rate: rate,
            ..self.clone()
        }
    }
}

/// Widths and switches for building the architecture. `paper` gives the
/// full-size network; smaller widths keep the same topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub patch_size: usize,
    pub conv_channels: usize,
    pub dense_width: usize,
    pub head_widths: Vec<usize>,
    pub dropout_rate: f64,
    /// Apply dropout inside the convolutional branch as well.
    pub dropout_in_conv: bool,
}

impl ArchConfig {
    pub fn paper(dropout_rate: f64) -> Self {
        ArchConfig {
            patch_size: 32,
            conv_channels: 128,
            dense_width: 512,
            head_widths: vec![256, 128],
            dropout_rate,
            dropout_in_conv: true,
        }
    }
}

/// Builds the architecture: four 3x3 convolutions (the first with stride 3)
/// each followed by ReLU, a 3x3 stride-1 average pool and flatten; a single
/// dense layer over the location triple; then concat and the dense head.
/// Dropout follows every ReLU.
pub fn build_network(cfg: &ArchConfig) -> Result<NetworkSpec, NnError> {
    let c = cfg.conv_channels;
    let mut conv = Vec::new();
    for (cin, stride) in [(1, 3), (c, 1), (c, 1), (c, 1)] {
        conv.push(LayerSpec::conv3x3(cin, c, stride));
        conv.push(LayerSpec::Relu);
        if cfg.dropout_in_conv {
            conv.push(LayerSpec::Dropout);
        }
    }
    conv.push(LayerSpec::AvgPool2d { pool: 3, stride: 1 });
    conv.push(LayerSpec::Flatten);

    let dense = vec![LayerSpec::dense(3, cfg.dense_width), LayerSpec::Relu, LayerSpec::Dropout];

    let mut spec = NetworkSpec {
        patch_channels: 1,
        patch_size: cfg.patch_size,
        location_inputs: 3,
        conv_branch: conv,
        dense_branch: dense,
        head: vec![LayerSpec::Concat],
        dropout_rate: cfg.dropout_rate,
    };
    let conv_out = branch_output_shape(
        &spec.conv_branch,
        Shape::Map {
            channels: 1,
            height: cfg.patch_size,
            width: cfg.patch_size,
        },
    )?
    .numel();
    let mut width = conv_out + cfg.dense_width;
    for &h in &cfg.head_widths {
        spec.head.push(LayerSpec::dense(width, h));
        spec.head.push(LayerSpec::Relu);
        spec.head.push(LayerSpec::Dropout);
        width = h;
    }
    spec.head.push(LayerSpec::dense(width, 2));
    Network::new(&spec)?;
    Ok(spec)
}

/// The full-size architecture (741,634 trainable parameters).
pub fn build_paper_network(dropout_rate: f64) -> Result<NetworkSpec, NnError> {
    build_network(&ArchConfig::paper(dropout_rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub branch: String,
    pub kind: String,
    pub label: String,
    pub input: String,
    pub output: String,
    pub params: usize,
}

impl LayerRow {
    pub fn summary(&self) -> String {
        format!("{}, params {}", self.label, self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDescription {
    pub rows: Vec<LayerRow>,
    pub total_params: usize,
    pub dropout_rate: f64,
}

impl NetworkDescription {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<6} {:<28} {:>12} {:>12} {:>9}\n",
            "branch", "layer", "input", "output", "params"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<6} {:<28} {:>12} {:>12} {:>9}\n",
                r.branch, r.label, r.input, r.output, r.params
            ));
        }
        out.push_str(&format!("total trainable parameters: {}\n", self.total_params));
        out
    }
}

/// Per-layer table of kinds, shapes and parameter counts.
pub fn describe(spec: &NetworkSpec) -> Result<NetworkDescription, NnError> {
    let net = Network::new(spec)?;
    let rows: Vec<LayerRow> = net
        .steps()
        .map(|s| {
            let label = match s.layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    dilation,
                } => format!("conv2d {kernel}x{kernel}/s{stride}/d{dilation} {in_channels}→{out_channels}"),
                LayerSpec::Dense { inputs, outputs } => format!("dense {inputs}→{outputs}"),
                LayerSpec::AvgPool2d { pool, stride } => format!("avgpool2d {pool}x{pool}/s{stride}"),
                LayerSpec::Dropout => format!("dropout {}", spec.dropout_rate),
                LayerSpec::Concat => match s.output {
                    Shape::Flat(n) => format!("concat {n}"),
                    _ => "concat".into(),
                },
                other => other.kind().to_string(),
            };
            LayerRow {
                branch: format!("{:?}", s.branch).to_lowercase(),
                kind: s.layer.kind().to_string(),
                label,
                input: s.input.to_string(),
                output: s.output.to_string(),
                params: s.layer.param_count(),
            }
        })
        .collect();
    let total_params = rows.iter().map(|r| r.params).sum();
    Ok(NetworkDescription {
        rows,
        total_params,
        dropout_rate: spec.dropout_rate,
    })
}
